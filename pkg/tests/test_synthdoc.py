import numpy as np
import pytest

from swindocseg.boxes import mask_to_box
from swindocseg.synthdoc import (ConfigurationError, DatasetIOError, SynthConfig,
                                 class_style, generate_sample, rasterize_instance,
                                 read_dataset, write_dataset)


def test_generate_deterministic():
    cfg = SynthConfig()
    a = generate_sample(7, cfg)
    b = generate_sample(7, cfg)
    assert np.array_equal(a.image, b.image)
    assert len(a.instances) == len(b.instances)
    for ia, ib in zip(a.instances, b.instances):
        assert ia.class_id == ib.class_id
        assert np.array_equal(ia.box, ib.box)
        assert np.array_equal(ia.mask, ib.mask)


def test_single_instance_tight_box():
    cfg = SynthConfig(max_instances=1)
    s = generate_sample(3, cfg)
    assert len(s.instances) == 1
    inst = s.instances[0]
    tight = mask_to_box(inst.mask)
    H = cfg.image_size
    assert np.all(np.abs(tight - inst.box) <= 1.0 / H + 1e-9)


def test_image_range_and_shape():
    cfg = SynthConfig(image_size=64)
    s = generate_sample(0, cfg)
    assert s.image.shape == (3, 64, 64)
    assert s.image.min() >= 0 and s.image.max() <= 1


def test_class_histogram_near_uniform():
    cfg = SynthConfig(num_classes=5, max_instances=4)
    counts = np.zeros(5)
    for seed in range(100):
        for inst in generate_sample(seed, cfg).instances:
            counts[inst.class_id] += 1
    expected = counts.sum() / 5
    assert np.all(np.abs(counts - expected) <= 0.2 * expected + 3)


def test_mask_box_consistency_all_instances():
    cfg = SynthConfig(max_instances=5)
    for seed in range(20):
        s = generate_sample(seed, cfg)
        for inst in s.instances:
            tight = mask_to_box(inst.mask)
            assert np.all(np.abs(tight - inst.box) <= 1.0 / cfg.image_size + 1e-9)
            assert inst.mask.sum() > 0


def test_overlap_bounded():
    cfg = SynthConfig(max_instances=6)
    for seed in range(10):
        s = generate_sample(seed, cfg)
        for i in range(len(s.instances)):
            for j in range(i + 1, len(s.instances)):
                a, b = s.instances[i].box, s.instances[j].box
                from swindocseg.synthdoc import _iou_cxcywh
                assert _iou_cxcywh(a, b) <= cfg.max_overlap_iou + 1e-9


def test_invalid_config():
    with pytest.raises(ConfigurationError):
        SynthConfig(image_size=100)
    with pytest.raises(ConfigurationError):
        SynthConfig(num_classes=1)
    with pytest.raises(ConfigurationError):
        SynthConfig(max_instances=0)


def test_rasterize_full_cover():
    m = rasterize_instance((0.5, 0.5, 1.0, 1.0), (16, 16), "solid")
    assert m.all()


def test_rasterize_centered_block():
    m = rasterize_instance((0.5, 0.5, 0.5, 0.5), (64, 64), "solid")
    expected = np.zeros((64, 64), dtype=np.uint8)
    expected[16:48, 16:48] = 1
    assert np.array_equal(m, expected)


def test_rasterize_degenerate_rejected():
    with pytest.raises(ValueError):
        rasterize_instance((0.5, 0.5, 0.01, 0.5), (64, 64), "solid")


@pytest.mark.parametrize("style", ["solid", "striped", "grid"])
def test_rasterize_tight_box_roundtrip(style):
    rng = np.random.default_rng(0)
    H = W = 64
    for _ in range(50):
        w = rng.uniform(0.1, 0.6)
        h = rng.uniform(0.1, 0.6)
        cx = rng.uniform(w / 2 + 0.01, 1 - w / 2 - 0.01)
        cy = rng.uniform(h / 2 + 0.01, 1 - h / 2 - 0.01)
        m = rasterize_instance((cx, cy, w, h), (H, W), style)
        tight = mask_to_box(m)
        assert np.all(np.abs(tight - np.array([cx, cy, w, h])) <= 1.0 / H + 1e-9)


def test_dataset_roundtrip(tmp_path):
    cfg = SynthConfig(image_size=64, max_instances=3)
    samples = [generate_sample(i, cfg) for i in range(10)]
    write_dataset(samples, tmp_path, cfg)
    back = read_dataset(tmp_path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.sample_id == b.sample_id
        assert np.allclose(a.image, b.image)
        for ia, ib in zip(a.instances, b.instances):
            assert ia.class_id == ib.class_id
            assert np.allclose(ia.box, ib.box)
            assert np.array_equal(ia.mask, ib.mask)


def test_write_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_dataset([], tmp_path)


def test_read_unknown_category(tmp_path):
    import json, os
    cfg = SynthConfig(image_size=64)
    write_dataset([generate_sample(0, cfg)], tmp_path, cfg)
    mf = tmp_path / "manifest.json"
    doc = json.loads(mf.read_text())
    doc["samples"][0]["annotations"][0]["category_id"] = 99
    mf.write_text(json.dumps(doc))
    with pytest.raises(DatasetIOError):
        read_dataset(tmp_path)


def test_read_version_mismatch(tmp_path):
    import json
    cfg = SynthConfig(image_size=64)
    write_dataset([generate_sample(0, cfg)], tmp_path, cfg)
    mf = tmp_path / "manifest.json"
    doc = json.loads(mf.read_text())
    doc["version"] = "999"
    mf.write_text(json.dumps(doc))
    with pytest.raises(DatasetIOError):
        read_dataset(tmp_path)


def test_read_missing_dir(tmp_path):
    with pytest.raises(DatasetIOError):
        read_dataset(tmp_path / "nope")
