"""Box and mask geometry helpers.

Boxes are normalized (cx, cy, w, h) in [0, 1] unless noted otherwise.
"""

import numpy as np
import torch


def box_cxcywh_to_xyxy(boxes):
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes):
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_iou_xyxy(a, b):
    """Pairwise IoU between [N,4] and [M,4] xyxy boxes -> [N,M]."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=1e-12)


def inverse_sigmoid(x, eps=1e-6):
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))


def mask_to_box(mask):
    """Tight normalized cxcywh box of a binary [H, W] mask.

    Pixel (r, c) covers the half-open cell [c/W, (c+1)/W) x [r/H, (r+1)/H).
    Empty mask -> full-image fallback box (0.5, 0.5, 1, 1).
    """
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    H, W = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        return np.array([0.5, 0.5, 1.0, 1.0], dtype=np.float64)
    y0, y1 = rows[0] / H, (rows[-1] + 1) / H
    x0, x1 = cols[0] / W, (cols[-1] + 1) / W
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dtype=np.float64)


def mask_iou(a, b):
    """IoU of two binary [H, W] masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / max(float(union), 1.0)


def rle_encode(mask):
    """COCO-style uncompressed RLE (column-major, counts start with zeros run)."""
    flat = np.asarray(mask, dtype=np.uint8).flatten(order="F")
    counts = []
    prev = 0
    run = 0
    for v in flat:
        if v == prev:
            run += 1
        else:
            counts.append(run)
            prev = v
            run = 1
    counts.append(run)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle):
    H, W = rle["size"]
    flat = np.zeros(H * W, dtype=np.uint8)
    pos = 0
    val = 0
    for run in rle["counts"]:
        if val:
            flat[pos : pos + run] = 1
        pos += run
        val = 1 - val
    return flat.reshape((H, W), order="F")
