import numpy as np
import pytest
import torch

from swindocseg.segbranch import (ClassInstanceMapper, PixelDecoder, PixelEmbeddingMap,
                                  filter_instances, predict_masks)


def test_pixel_decoder_shapes():
    dec = PixelDecoder(backbone_dim=16, dim=8, mask_dim=6)
    s4 = torch.rand(2, 16, 32, 32)
    e8 = torch.rand(2, 8, 16, 16)
    pem = dec(s4, e8)
    assert pem.pem.shape == (2, 6, 32, 32)


def test_pixel_decoder_shape_mismatch():
    dec = PixelDecoder(16, 8, 6)
    with pytest.raises(ValueError):
        dec(torch.rand(1, 16, 32, 32), torch.rand(1, 8, 8, 8))


def test_pixel_decoder_constant_upsample():
    # spatially constant inputs stay spatially constant through the 1x1 map,
    # bilinear upsample, and conv stack (padding aside, checked away from edges)
    dec = PixelDecoder(4, 4, 4)
    s4 = torch.ones(1, 4, 8, 8) * 0.3
    e8 = torch.ones(1, 4, 4, 4) * -0.7
    pem = dec(s4, e8).pem[:, :, 2:6, 2:6]
    ref = pem[0, :, 0, 0]
    assert torch.allclose(pem, ref[None, :, None, None].expand_as(pem), atol=1e-6)


def test_predict_masks_triple_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, d, h, w = 3, 5, 4, 6
        q = torch.tensor(rng.normal(size=(n, d)))
        pem = torch.tensor(rng.normal(size=(d, h, w)))
        got = predict_masks(q, pem)
        expect = torch.zeros(n, h, w, dtype=torch.float64)
        for i in range(n):
            for y in range(h):
                for x in range(w):
                    expect[i, y, x] = float(q[i] @ pem[:, y, x])
        assert torch.allclose(got, expect, atol=1e-10)


def test_predict_masks_basis_query():
    # a one-hot query reads out the corresponding PEM channel exactly
    pem = torch.rand(5, 3, 3)
    out = predict_masks(torch.eye(5), PixelEmbeddingMap(pem))
    assert torch.allclose(out, pem)


def test_predict_masks_zero_query():
    pem = torch.rand(4, 6, 6)
    assert torch.all(predict_masks(torch.zeros(2, 4), pem) == 0)


def test_predict_masks_bilinearity():
    rng = np.random.default_rng(1)
    q1 = torch.tensor(rng.normal(size=(2, 4)))
    q2 = torch.tensor(rng.normal(size=(2, 4)))
    pem = torch.tensor(rng.normal(size=(4, 5, 5)))
    a, b = 0.37, -1.4
    lhs = predict_masks(a * q1 + b * q2, pem)
    rhs = a * predict_masks(q1, pem) + b * predict_masks(q2, pem)
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_predict_masks_batched_matches_unbatched():
    q = torch.rand(2, 3, 4)
    pem = torch.rand(2, 4, 5, 5)
    out = predict_masks(q, PixelEmbeddingMap(pem))
    assert out.shape == (2, 3, 5, 5)
    for b in range(2):
        assert torch.allclose(out[b], predict_masks(q[b], pem[b]))


def test_predict_masks_dim_mismatch():
    with pytest.raises(ValueError):
        predict_masks(torch.rand(2, 3), torch.rand(4, 5, 5))


def test_mapper_shapes_and_one_to_one():
    torch.manual_seed(0)
    mapper = ClassInstanceMapper(dim=8, num_classes=5, mask_dim=6)
    q = torch.rand(1, 7, 8)
    boxes = torch.rand(1, 7, 4)
    pem = PixelEmbeddingMap(torch.rand(1, 6, 16, 16))
    pred = mapper(q, boxes, pem)
    assert pred.class_logits.shape == (1, 7, 6)  # includes background column
    assert pred.mask_logits.shape == (1, 7, 16, 16)
    assert pred.boxes is boxes
    # one-to-one: permuting queries permutes all outputs identically
    perm = torch.tensor([3, 1, 4, 0, 6, 2, 5])
    pred_p = mapper(q[:, perm], boxes[:, perm], pem)
    assert torch.allclose(pred_p.class_logits, pred.class_logits[:, perm], atol=1e-6)
    assert torch.allclose(pred_p.mask_logits, pred.mask_logits[:, perm], atol=1e-6)


def test_filter_instances_drops_background():
    logits = torch.tensor([[[4.0, 0.0, 0.0], [0.0, 0.0, 9.0], [0.0, 3.0, 0.0]]])
    pred = InstancePredictionFactory(logits)
    out = filter_instances(pred, score_threshold=0.5)
    assert len(out) == 1
    kept = out[0]
    assert [k["class_id"] for k in kept] == [0, 1]
    probs = torch.softmax(logits[0], dim=-1)
    assert kept[0]["score"] == pytest.approx(float(probs[0, 0]), rel=1e-6)
    assert kept[1]["score"] == pytest.approx(float(probs[2, 1]), rel=1e-6)


def test_filter_instances_all_background():
    logits = torch.zeros(1, 4, 3)
    logits[..., -1] = 5.0
    out = filter_instances(InstancePredictionFactory(logits))
    assert out == [[]]


def test_filter_instances_score_threshold():
    logits = torch.tensor([[[0.2, 0.0, 0.0]]])  # foreground argmax but weak score
    out = filter_instances(InstancePredictionFactory(logits), score_threshold=0.9)
    assert out == [[]]


def InstancePredictionFactory(class_logits):
    from swindocseg.segbranch import InstancePrediction

    b, q, _ = class_logits.shape
    return InstancePrediction(
        class_logits=class_logits,
        boxes=torch.rand(b, q, 4),
        mask_logits=torch.rand(b, q, 4, 4),
    )
