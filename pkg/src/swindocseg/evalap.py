"""COCO-style average-precision evaluation on boxes and masks.

Pure function of (predictions, ground truth): score-ranked greedy IoU
matching per threshold with 101-point interpolated precision.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import box_cxcywh_to_xyxy, box_iou_xyxy, mask_iou


@dataclass
class EvalReport:
    mask_ap50: float
    mask_ap75: float
    box_ap50: float
    per_class: dict = field(default_factory=dict)  # class_id -> mask AP@0.5
    num_images: int = 0
    num_gt: int = 0

    def as_dict(self):
        return {
            "mask_ap50": self.mask_ap50,
            "mask_ap75": self.mask_ap75,
            "box_ap50": self.box_ap50,
            "per_class_mask_ap50": self.per_class,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
        }


def _box_iou_single(a, b):
    ta = box_cxcywh_to_xyxy(torch.as_tensor(a, dtype=torch.float64).view(1, 4))
    tb = box_cxcywh_to_xyxy(torch.as_tensor(b, dtype=torch.float64).view(1, 4))
    return float(box_iou_xyxy(ta, tb)[0, 0])


def average_precision(predictions, gts, iou_fn, iou_thr):
    """AP for one class at one IoU threshold.

    predictions: list of (image_id, score, obj); gts: image_id -> list of obj.
    """
    num_gt = sum(len(v) for v in gts.values())
    if num_gt == 0:
        return None
    order = sorted(range(len(predictions)),
                   key=lambda i: (-predictions[i][1], predictions[i][0], i))
    matched = {img: np.zeros(len(v), dtype=bool) for img, v in gts.items()}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _score, obj = predictions[i]
        best, best_j = 0.0, -1
        for j, gt_obj in enumerate(gts.get(img, [])):
            if matched[img][j]:
                continue
            iou = iou_fn(obj, gt_obj)
            if iou > best:
                best, best_j = iou, j
        if best >= iou_thr and best_j >= 0:
            matched[img][best_j] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101


def evaluate_predictions(predictions_by_image, gts_by_image, num_classes):
    """predictions_by_image: image_id -> list of dicts with class_id, score,
    box (cxcywh), mask (binary [H, W]); gts_by_image: image_id -> list of
    dicts with class_id, box, mask."""
    mask_ap = {0.5: [], 0.75: []}
    box_ap = []
    per_class = {}
    num_gt = 0
    for c in range(num_classes):
        preds_c = []
        mask_gts = {}
        box_gts = {}
        for img, preds in predictions_by_image.items():
            for p in preds:
                if p["class_id"] == c:
                    preds_c.append((img, p["score"], p))
        for img, gts in gts_by_image.items():
            objs = [g for g in gts if g["class_id"] == c]
            mask_gts[img] = objs
            box_gts[img] = objs
            num_gt += len(objs)
        for thr in (0.5, 0.75):
            ap = average_precision(preds_c, mask_gts,
                                   lambda p, g: mask_iou(p["mask"], g["mask"]), thr)
            if ap is not None:
                mask_ap[thr].append(ap)
                if thr == 0.5:
                    per_class[c] = ap
        ap = average_precision(preds_c, box_gts,
                               lambda p, g: _box_iou_single(p["box"], g["box"]), 0.5)
        if ap is not None:
            box_ap.append(ap)
    return EvalReport(
        mask_ap50=float(np.mean(mask_ap[0.5])) if mask_ap[0.5] else 0.0,
        mask_ap75=float(np.mean(mask_ap[0.75])) if mask_ap[0.75] else 0.0,
        box_ap50=float(np.mean(box_ap)) if box_ap else 0.0,
        per_class=per_class,
        num_images=len(gts_by_image),
        num_gt=num_gt,
    )
