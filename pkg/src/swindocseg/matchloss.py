"""Bipartite matching costs, the Hungarian assignment, and all training losses.

Hybrid matching adds a mask term (dice + BCE) to the classification (focal)
and box (L1) costs; a scheduled weight inflates the mask term when
fine-tuning across dataset presets and decays toward convergence.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment


class ConfigurationError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_mask: float = 5.0  # applied to the dice + BCE mask cost

    def __post_init__(self):
        if self.w_cls < 0 or self.w_l1 < 0 or self.w_mask < 0:
            raise ConfigurationError("cost weights must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    dice: float = 5.0
    bce: float = 5.0
    low_con: float = 1.0
    high_con: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.focal_alpha <= 0 or self.focal_gamma < 0:
            raise ConfigurationError("need focal_alpha > 0 and focal_gamma >= 0")


@dataclass
class MatchResult:
    pairs: list                  # (query index, gt index), sorted by gt index
    unmatched_queries: list
    total_cost: float
    per_term: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DomainShiftSchedule:
    w_start: float
    w_end: float
    total_steps: int
    shape: str = "cosine"

    def __post_init__(self):
        if not (self.w_start >= self.w_end >= 0):
            raise ConfigurationError("need w_start >= w_end >= 0")
        if self.shape not in ("cosine", "linear"):
            raise ConfigurationError(f"unknown schedule shape {self.shape!r}")


def hybrid_weight(step, sched: DomainShiftSchedule):
    """Monotone non-increasing interpolation from w_start to w_end."""
    if step < 0 or step > sched.total_steps:
        warnings.warn(f"schedule step {step} outside [0, {sched.total_steps}], clamping")
        step = min(max(step, 0), sched.total_steps)
    t = step / max(sched.total_steps, 1)
    if sched.shape == "linear":
        frac = t
    else:
        frac = (1 - math.cos(math.pi * t)) / 2
    return sched.w_start + (sched.w_end - sched.w_start) * frac


# ---------------------------------------------------------------------------
# elementary losses


def focal_loss(pred_logits, targets, alpha=0.25, gamma=2.0):
    """Mean softmax focal loss -alpha (1 - p_t)^gamma log p_t.

    pred_logits: [N, C] (background is an ordinary class index);
    targets: [N] class indices.
    """
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    logp = F.log_softmax(pred_logits, dim=-1)
    logp_t = logp.gather(1, targets.view(-1, 1)).squeeze(1)
    p_t = logp_t.exp()
    return (-alpha * (1 - p_t) ** gamma * logp_t).mean()


def l1_box_loss(pred, gt):
    """Mean absolute coordinate difference between [N, 4] box sets."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def dice_loss(pred_probs, gt_masks, eps=1.0):
    """1 - 2|X.Y| / (|X| + |Y|) per instance on probabilities, averaged."""
    if pred_probs.shape != gt_masks.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_probs.shape)} vs {tuple(gt_masks.shape)}")
    x = pred_probs.flatten(1)
    y = gt_masks.flatten(1)
    num = 2 * (x * y).sum(-1) + eps
    den = x.sum(-1) + y.sum(-1) + eps
    return (1 - num / den).mean()


def mask_bce(pred_logits, gt_masks):
    """Mean per-pixel binary cross-entropy on mask logits."""
    if pred_logits.shape != gt_masks.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(gt_masks.shape)}")
    return F.binary_cross_entropy_with_logits(pred_logits, gt_masks)


# ---------------------------------------------------------------------------
# matching


def _focal_class_cost(class_logits, gt_labels, alpha=0.25, gamma=2.0):
    """DETR-style focal classification cost on sigmoid scores -> [Q, q]."""
    p = class_logits.sigmoid()
    pos = alpha * (1 - p) ** gamma * (-(p + 1e-8).log())
    neg = (1 - alpha) * p**gamma * (-(1 - p + 1e-8).log())
    return pos[:, gt_labels] - neg[:, gt_labels]


def _pairwise_dice_cost(mask_logits, gt_masks, eps=1.0):
    x = mask_logits.sigmoid().flatten(1)  # [Q, P]
    y = gt_masks.flatten(1)               # [q, P]
    num = 2 * (x @ y.T) + eps
    den = x.sum(-1)[:, None] + y.sum(-1)[None, :] + eps
    return 1 - num / den


def _pairwise_bce_cost(mask_logits, gt_masks):
    x = mask_logits.flatten(1)
    y = gt_masks.flatten(1)
    P = x.shape[1]
    pos = F.softplus(-x)   # -log sigmoid(x)
    neg = F.softplus(x)    # -log (1 - sigmoid(x))
    return (pos @ y.T + neg @ (1 - y).T) / P


def cost_matrix(class_logits, boxes, mask_logits, gt_labels, gt_boxes, gt_masks,
                w: CostWeights, alpha=0.25, gamma=2.0):
    """[Q, q] matching cost. Mask costs expect GT masks at mask-logit resolution.

    class_logits cover foreground classes only (no background column).
    """
    cost = w.w_cls * _focal_class_cost(class_logits, gt_labels, alpha, gamma)
    cost = cost + w.w_l1 * torch.cdist(boxes, gt_boxes, p=1) / 4.0
    if w.w_mask > 0 and mask_logits is not None:
        cost = cost + w.w_mask * (_pairwise_dice_cost(mask_logits, gt_masks)
                                  + _pairwise_bce_cost(mask_logits, gt_masks))
    return cost


def hungarian(cost):
    """Minimum-cost injective assignment of GT columns to query rows.

    Ties break deterministically: among optimal assignments, the one that is
    lexicographically smallest in (gt index, query index) order.
    """
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    Q, q = cost.shape
    rows, cols = linear_sum_assignment(cost)
    total = float(cost[rows, cols].sum())
    tol = 1e-9 * (1 + abs(total))

    # lexicographic refinement: fix gts in order, each to its smallest
    # feasible query, verifying the optimum is preserved
    avail_q = list(range(Q))
    remaining_g = list(range(q))
    fixed = 0.0
    pairs = []
    for g in range(q):
        remaining_g.remove(g)
        chosen = None
        if len(remaining_g) < len(avail_q) or len(remaining_g) == 0:
            candidates = list(avail_q)
        else:
            candidates = list(avail_q)
        for qi in candidates:
            rest_q = [x for x in avail_q if x != qi]
            sub = cost[np.ix_(rest_q, remaining_g)]
            if min(sub.shape) > 0:
                r2, c2 = linear_sum_assignment(sub)
                rest_cost = float(sub[r2, c2].sum())
            else:
                rest_cost = 0.0
            if fixed + cost[qi, g] + rest_cost <= total + tol:
                chosen = qi
                break
        if chosen is None:
            # gt g stays unmatched (only possible when q > Q)
            continue
        pairs.append((chosen, g))
        avail_q.remove(chosen)
        fixed += cost[chosen, g]

    matched_q = {p[0] for p in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched_queries=[x for x in range(Q) if x not in matched_q],
        total_cost=float(sum(cost[qi, g] for qi, g in pairs)),
    )


# ---------------------------------------------------------------------------
# total loss


def _check_finite(name, value):
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite loss term: {name}")
    return value


class SetCriterion:
    """Assembles matching losses over all decoder layers, encoder-stage
    selection losses, contrastive terms, and CDN denoising losses."""

    def __init__(self, num_classes, cost_weights: CostWeights = CostWeights(),
                 loss_weights: LossWeights = LossWeights(), alpha=None, gamma=None):
        self.num_classes = num_classes
        self.cost_weights = cost_weights
        self.loss_weights = loss_weights
        self.alpha = loss_weights.focal_alpha if alpha is None else alpha
        self.gamma = loss_weights.focal_gamma if gamma is None else gamma

    def _gt_masks_at(self, masks, shape):
        if masks.shape[-2:] == shape:
            return masks
        return F.interpolate(masks.unsqueeze(1), size=shape, mode="bilinear",
                             align_corners=False).squeeze(1)

    def _matching_losses(self, pred, target, w_mask_eff):
        """Losses for one image's matching-query predictions vs its GT."""
        device = pred.class_logits.device
        dtype = pred.class_logits.dtype
        zero = torch.zeros((), device=device, dtype=dtype)
        labels = target["labels"]
        q = labels.shape[0]
        Q = pred.class_logits.shape[0]
        bg = pred.class_logits.new_full((Q,), self.num_classes, dtype=torch.long,
                                        device=device)
        if q == 0:
            cls = focal_loss(pred.class_logits, bg, self.alpha, self.gamma)
            return cls, zero, zero, zero

        gt_masks = self._gt_masks_at(target["masks"].to(dtype), pred.mask_logits.shape[-2:])
        cw = CostWeights(self.cost_weights.w_cls, self.cost_weights.w_l1, w_mask_eff)
        with torch.no_grad():
            cost = cost_matrix(pred.class_logits[:, : self.num_classes], pred.boxes,
                               pred.mask_logits, labels, target["boxes"], gt_masks,
                               cw, self.alpha, self.gamma)
        match = hungarian(cost)
        qi = torch.tensor([p[0] for p in match.pairs], dtype=torch.long, device=device)
        gi = torch.tensor([p[1] for p in match.pairs], dtype=torch.long, device=device)

        tgt_classes = bg.clone()
        tgt_classes[qi] = labels[gi]
        cls = focal_loss(pred.class_logits, tgt_classes, self.alpha, self.gamma)
        l1 = l1_box_loss(pred.boxes[qi], target["boxes"][gi])
        dice = dice_loss(pred.mask_logits[qi].sigmoid(), gt_masks[gi])
        bce = mask_bce(pred.mask_logits[qi], gt_masks[gi])
        return cls, l1, dice, bce

    def _cdn_losses(self, pred, cdn, target, w_mask_eff):
        """Denoising losses: positives reconstruct their known GT, negatives
        are pushed to background by the focal term. No matching involved."""
        device = pred.class_logits.device
        dtype = pred.class_logits.dtype
        zero = torch.zeros((), device=device, dtype=dtype)
        if len(cdn) == 0:
            return zero, zero
        pos = cdn.polarity > 0
        neg = ~pos
        cls_all = focal_loss(pred.class_logits, cdn.target_labels.to(device),
                             self.alpha, self.gamma)
        pos_terms = zero
        if bool(pos.any()):
            gt_masks = self._gt_masks_at(target["masks"].to(dtype), pred.mask_logits.shape[-2:])
            gi = cdn.gt_index[pos]
            l1 = l1_box_loss(pred.boxes[pos], cdn.target_boxes[pos].to(pred.boxes))
            dice = dice_loss(pred.mask_logits[pos].sigmoid(), gt_masks[gi])
            bce = mask_bce(pred.mask_logits[pos], gt_masks[gi])
            lw = self.loss_weights
            pos_terms = lw.l1 * l1 + w_mask_eff / max(self.cost_weights.w_mask, 1e-12) * (
                lw.dice * dice + lw.bce * bce)
        # the focal term covers both polarities; report it under cdn_neg
        return pos_terms, self.loss_weights.cls * cls_all

    def total_loss(self, outputs, targets, w_mask_eff=None):
        """Weighted sum of all terms plus a per-term breakdown dict.

        outputs: dict with "layers" (per decoder layer, per image
        InstancePrediction views), optional "encoder", "cdn_layers" + "cdn",
        and optional precomputed "low_con" / "high_con" scalars.
        """
        lw = self.loss_weights
        if w_mask_eff is None:
            w_mask_eff = self.cost_weights.w_mask
        mask_scale = w_mask_eff / max(self.cost_weights.w_mask, 1e-12)

        some = outputs["layers"][0][0].class_logits
        zero = torch.zeros((), device=some.device, dtype=some.dtype)
        acc = {"cls": zero, "l1": zero, "mask_dice": zero, "mask_bce": zero,
               "cdn_pos": zero, "cdn_neg": zero, "low_con": zero, "high_con": zero}

        stages = [out for out in outputs["layers"]]
        if outputs.get("encoder") is not None:
            stages = stages + [outputs["encoder"]]
        for stage in stages:
            for pred, target in zip(stage, targets):
                cls, l1, dice, bce = self._matching_losses(pred, target, w_mask_eff)
                acc["cls"] = acc["cls"] + lw.cls * cls
                acc["l1"] = acc["l1"] + lw.l1 * l1
                acc["mask_dice"] = acc["mask_dice"] + mask_scale * lw.dice * dice
                acc["mask_bce"] = acc["mask_bce"] + mask_scale * lw.bce * bce

        for layer_preds in outputs.get("cdn_layers", []):
            for pred, cdn, target in zip(layer_preds, outputs["cdn"], targets):
                pos_t, neg_t = self._cdn_losses(pred, cdn, target, w_mask_eff)
                acc["cdn_pos"] = acc["cdn_pos"] + pos_t
                acc["cdn_neg"] = acc["cdn_neg"] + neg_t

        if outputs.get("low_con") is not None:
            acc["low_con"] = lw.low_con * outputs["low_con"]
        if outputs.get("high_con") is not None:
            acc["high_con"] = lw.high_con * outputs["high_con"]

        for name, value in acc.items():
            _check_finite(name, value)
        total = sum(acc.values())
        breakdown = {k: float(v.detach()) for k, v in acc.items()}
        breakdown["w_mask_eff"] = float(w_mask_eff)
        return total, breakdown
