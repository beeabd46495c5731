"""Synthetic document-layout generation and dataset persistence.

Samples are deterministic functions of (seed, config): filled/textured
rectangles standing in for text blocks, titles, tables, figures and lists,
each with an exact binary instance mask.
"""

import colorsys
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MANIFEST_VERSION = "1"

DEFAULT_CLASS_NAMES = ["text", "title", "table", "figure", "list"]

# texture per class; extra classes cycle through the styles
CLASS_STYLES = ["striped", "solid", "grid", "solid", "striped"]
STYLES = ("solid", "striped", "grid")


class ConfigurationError(ValueError):
    pass


class DatasetIOError(IOError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 256
    num_classes: int = 5
    max_instances: int = 4
    min_instances: int = 1
    max_overlap_iou: float = 0.1
    min_rel_size: float = 0.10
    max_rel_size: float = 0.40
    margin: float = 0.02

    def __post_init__(self):
        if self.image_size % 32 != 0 or self.image_size <= 0:
            raise ConfigurationError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.max_instances < 1 or self.min_instances < 1 or self.min_instances > self.max_instances:
            raise ConfigurationError("need 1 <= min_instances <= max_instances")

    @property
    def class_names(self):
        names = list(DEFAULT_CLASS_NAMES[: self.num_classes])
        while len(names) < self.num_classes:
            names.append(f"class{len(names)}")
        return names


@dataclass
class Instance:
    class_id: int
    box: np.ndarray  # normalized (cx, cy, w, h)
    mask: np.ndarray  # uint8 [H, W]


@dataclass
class LayoutSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    instances: list = field(default_factory=list)
    sample_id: int = 0


def class_style(class_id):
    return CLASS_STYLES[class_id % len(CLASS_STYLES)]


def class_colors(class_id, num_classes):
    """Deterministic (fill, shade) RGB pair for a class.

    Region types get distinct light tints and darker stroke colors, spread
    evenly around the hue wheel, so class identity is carried by coarse
    appearance as well as by the fine texture pattern.
    """
    hue = (class_id % max(num_classes, 1)) / max(num_classes, 1)
    fill = np.array(colorsys.hsv_to_rgb(hue, 0.25, 0.78), dtype=np.float32)
    shade = np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.32), dtype=np.float32)
    return fill, shade


def rasterize_instance(box, image_size, style="solid"):
    """Binary mask of a normalized cxcywh box on an (H, W) grid.

    The mask's tight bounding box equals the input box within one pixel;
    striped/grid textures keep their border rows/columns filled so that
    holds for every style.
    """
    H, W = image_size
    cx, cy, w, h = [float(v) for v in box]
    if style not in STYLES:
        raise ConfigurationError(f"unknown style {style!r}")
    if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1):
        raise ValueError(f"box out of range: {(cx, cy, w, h)}")
    if w * W < 2 or h * H < 2:
        raise ValueError(f"degenerate (sub-2px) box: {(cx, cy, w, h)} on {image_size}")
    x0 = int(round((cx - w / 2) * W))
    x1 = int(round((cx + w / 2) * W))
    y0 = int(round((cy - h / 2) * H))
    y1 = int(round((cy + h / 2) * H))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, W), min(y1, H)
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise ValueError(f"degenerate box after quantization: {(cx, cy, w, h)}")

    mask = np.zeros((H, W), dtype=np.uint8)
    if style == "solid":
        mask[y0:y1, x0:x1] = 1
    elif style == "striped":
        # full-width "text lines": 2px lines, 2px gaps, last row forced on
        for r in range(y0, y1):
            if (r - y0) % 4 < 2:
                mask[r, x0:x1] = 1
        mask[y1 - 1, x0:x1] = 1
    elif style == "grid":
        # table ruling incl. outer border
        mask[y0:y1:4, x0:x1] = 1
        mask[y0:y1, x0:x1:6] = 1
        mask[y1 - 1, x0:x1] = 1
        mask[y0:y1, x1 - 1] = 1
    return mask


def _sample_box(rng, cfg):
    w = rng.uniform(cfg.min_rel_size, cfg.max_rel_size)
    h = rng.uniform(cfg.min_rel_size, cfg.max_rel_size)
    cx = rng.uniform(cfg.margin + w / 2, 1 - cfg.margin - w / 2)
    cy = rng.uniform(cfg.margin + h / 2, 1 - cfg.margin - h / 2)
    return np.array([cx, cy, w, h])


def _iou_cxcywh(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / max(union, 1e-12)


def _snap_box(box, H, W):
    """Snap a normalized box to the pixel grid so mask_to_box is exact."""
    cx, cy, w, h = box
    x0 = round((cx - w / 2) * W)
    x1 = round((cx + w / 2) * W)
    y0 = round((cy - h / 2) * H)
    y1 = round((cy + h / 2) * H)
    return np.array([(x0 + x1) / (2 * W), (y0 + y1) / (2 * H), (x1 - x0) / W, (y1 - y0) / H])


def generate_sample(seed, cfg):
    """Deterministic layout sample for (seed, cfg)."""
    rng = np.random.default_rng(seed)
    H = W = cfg.image_size
    n_inst = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))

    boxes = []
    for _ in range(n_inst):
        for _attempt in range(200):
            cand = _snap_box(_sample_box(rng, cfg), H, W)
            if all(_iou_cxcywh(cand, b) <= cfg.max_overlap_iou for b in boxes):
                boxes.append(cand)
                break

    # paper-ish page: light background with faint deterministic grain
    image = np.full((3, H, W), 0.92, dtype=np.float32)
    image += rng.uniform(-0.02, 0.02, size=(1, H, W)).astype(np.float32)

    instances = []
    for box in boxes:
        class_id = int(rng.integers(0, cfg.num_classes))
        # the instance mask is the solid region; the class texture (stripes,
        # ruling) is appearance only: a light region fill under darker lines
        mask = rasterize_instance(box, (H, W), "solid")
        texture = rasterize_instance(box, (H, W), class_style(class_id))
        fill, shade = class_colors(class_id, cfg.num_classes)
        fill = np.clip(fill + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0).astype(np.float32)
        shade = np.clip(shade + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0).astype(np.float32)
        image[:, mask > 0] = fill[:, None]
        image[:, texture > 0] = shade[:, None]
        instances.append(Instance(class_id=class_id, box=box, mask=mask))

    image = np.clip(image, 0.0, 1.0)
    # quantize to the 8-bit grid so PNG persistence is lossless
    image = np.round(image * 255.0).astype(np.float32) / 255.0
    return LayoutSample(image=image, instances=instances, sample_id=int(seed))


def generate_dataset(num_samples, cfg, seed0=0):
    return [generate_sample(seed0 + i, cfg) for i in range(num_samples)]


def write_dataset(samples, out_dir, cfg=None):
    """Persist samples as manifest.json + images/*.png + masks/*.png."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    num_classes = cfg.num_classes if cfg is not None else (
        max(inst.class_id for s in samples for inst in s.instances) + 1
    )
    names = (cfg or SynthConfig(num_classes=max(num_classes, 2))).class_names[:num_classes]
    manifest = {
        "version": MANIFEST_VERSION,
        "categories": [{"id": i, "name": n} for i, n in enumerate(names)],
        "samples": [],
    }
    for s in samples:
        img8 = np.round(np.transpose(s.image, (1, 2, 0)) * 255.0).astype(np.uint8)
        image_rel = f"images/{s.sample_id:06d}.png"
        Image.fromarray(img8).save(os.path.join(out_dir, image_rel))
        anns = []
        for k, inst in enumerate(s.instances):
            mask_rel = f"masks/{s.sample_id:06d}_{k}.png"
            Image.fromarray((inst.mask * 255).astype(np.uint8)).save(os.path.join(out_dir, mask_rel))
            anns.append({
                "category_id": int(inst.class_id),
                "bbox": [float(v) for v in inst.box],
                "mask_path": mask_rel,
            })
        manifest["samples"].append({
            "sample_id": int(s.sample_id),
            "image_path": image_rel,
            "annotations": anns,
        })
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def read_dataset(data_dir):
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetIOError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetIOError(
            f"schema version mismatch in {manifest_path}: "
            f"got {manifest.get('version')!r}, expected {MANIFEST_VERSION!r}"
        )
    cat_ids = sorted(c["id"] for c in manifest["categories"])
    if cat_ids != list(range(len(cat_ids))):
        raise DatasetIOError(f"category ids not dense from 0 in {manifest_path}: {cat_ids}")
    known = set(cat_ids)

    samples = []
    for rec in manifest["samples"]:
        image_path = os.path.join(data_dir, rec["image_path"])
        if not os.path.exists(image_path):
            raise DatasetIOError(f"missing image: {image_path}")
        img = np.asarray(Image.open(image_path), dtype=np.float32) / 255.0
        image = np.transpose(img, (2, 0, 1))
        instances = []
        for ann in rec["annotations"]:
            if ann["category_id"] not in known:
                raise DatasetIOError(
                    f"annotation references unknown category {ann['category_id']} in {manifest_path}"
                )
            mask_path = os.path.join(data_dir, ann["mask_path"])
            if not os.path.exists(mask_path):
                raise DatasetIOError(f"missing mask: {mask_path}")
            mask = (np.asarray(Image.open(mask_path)) > 127).astype(np.uint8)
            instances.append(Instance(
                class_id=int(ann["category_id"]),
                box=np.array(ann["bbox"], dtype=np.float64),
                mask=mask,
            ))
        samples.append(LayoutSample(image=image, instances=instances, sample_id=int(rec["sample_id"])))
    return samples
