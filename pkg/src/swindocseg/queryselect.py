"""Encoder-output heads, top-k query selection, contrastive projection heads,
prototype bank with concentration estimates, and mask-derived anchor init."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import inverse_sigmoid, mask_to_box
from .transformer import MLP, TokenSequence, grid_reference_points


class ConfigurationError(ValueError):
    pass


TAU_PRESETS = {"publaynet": 0.02, "prima": 0.6, "hj": 0.1, "tablebank": 0.2}


@dataclass
class EncoderHeadOutput:
    class_logits: torch.Tensor  # [B, N, num_classes]
    boxes: torch.Tensor         # [B, N, 4] normalized cxcywh
    mask_embed: torch.Tensor    # [B, N, D_m] high-projected segmentation features
    class_feat: torch.Tensor    # [B, N, D] features feeding the class head
    det_feat: torch.Tensor      # [B, N, D] features feeding the box head
    seg_feat: torch.Tensor      # [B, N, D] features feeding the mask head


class HighProjection(nn.Module):
    """Deep MLP followed by L2 normalization."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.mlp = MLP(dim, dim, out_dim, 4)

    def forward(self, x):
        return F.normalize(self.mlp(x), dim=-1)


class EncoderHeads(nn.Module):
    """Classification, detection and segmentation heads over encoder tokens.

    Box predictions are deltas from the token grid prior through sigmoid.
    The mask embedding is the segmentation features put through the high-level
    projection head; masks come from its dot product with the pixel embedding
    map, so ablating the high head changes masks but never boxes.
    """

    def __init__(self, dim, num_classes, mask_dim):
        super().__init__()
        self.class_branch = nn.Linear(dim, dim)
        self.class_head = nn.Linear(dim, num_classes)
        self.det_branch = nn.Linear(dim, dim)
        self.box_head = MLP(dim, dim, 4, 3)
        self.seg_branch = nn.Linear(dim, dim)
        self.high_proj = HighProjection(dim, mask_dim)
        nn.init.constant_(self.box_head.layers[-1].weight, 0.0)
        nn.init.constant_(self.box_head.layers[-1].bias, 0.0)

    def forward(self, memory: TokenSequence):
        x = memory.tokens
        refs = grid_reference_points(memory.spatial_shapes, device=x.device, dtype=x.dtype)
        refs = refs.unsqueeze(0).expand(x.shape[0], -1, -1)
        class_feat = self.class_branch(x)
        det_feat = self.det_branch(x)
        seg_feat = self.seg_branch(x)
        delta = self.box_head(det_feat)
        prior_wh = inverse_sigmoid(x.new_full((1, 1, 2), 0.1))
        prior = torch.cat([inverse_sigmoid(refs), prior_wh.expand_as(refs)], dim=-1)
        boxes = torch.sigmoid(prior + delta)
        return EncoderHeadOutput(
            class_logits=self.class_head(class_feat),
            boxes=boxes,
            mask_embed=self.high_proj(seg_feat),
            class_feat=class_feat,
            det_feat=det_feat,
            seg_feat=seg_feat,
        )


def select_topk(class_logits, K):
    """Indices of the K tokens with the largest max-over-classes sigmoid score.

    Ties break toward the lower token index. class_logits: [N, C] -> [K] longs.
    """
    N = class_logits.shape[0]
    if K > N:
        raise ConfigurationError(f"K={K} exceeds number of tokens {N}")
    scores = torch.sigmoid(class_logits).max(dim=-1).values.detach().cpu().numpy()
    order = np.lexsort((np.arange(N), -scores))
    return torch.as_tensor(order[:K].copy(), dtype=torch.long, device=class_logits.device)


class LowProjection(nn.Module):
    """Shallow MLP followed by L2 normalization."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.mlp = MLP(dim, dim, out_dim, 2)

    def forward(self, x):
        return F.normalize(self.mlp(x), dim=-1)


def loss_low(f_det, f_seg, f_cand, tau, reduction="mean"):
    """Contrastive loss pairing detection and segmentation embeddings of the
    same tokens against a classification-ranked candidate set.

    f_det: [n, D]; f_seg: [n', D]; f_cand: [k, D]; all unit-norm.
    Each (i, j) pair contributes -log( exp(f_i.f_j / tau) / sum_c exp(f_c.f_j / tau) ).
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if f_det.shape[0] < 1 or f_seg.shape[0] < 1 or f_cand.shape[0] < 1:
        raise ConfigurationError("loss_low needs nonempty embedding sets")
    pos = f_det @ f_seg.transpose(0, 1) / tau            # [n, n']
    denom = torch.logsumexp(f_cand @ f_seg.transpose(0, 1) / tau, dim=0)  # [n']
    terms = denom.unsqueeze(0) - pos
    return terms.mean() if reduction == "mean" else terms.sum()


def loss_high(features, prototypes, phi, assignment, reduction="mean"):
    """Prototype contrastive loss with per-prototype concentration temperatures.

    features: [n, D] unit-norm; prototypes: [m, D]; phi: [m] > 0;
    assignment: [n] prototype index per feature. The denominator runs over the
    feature set itself as candidates.
    """
    if prototypes.shape[0] < 1:
        raise ConfigurationError("empty prototype bank")
    sim = features @ prototypes.transpose(0, 1)          # [n, m]
    scaled = sim / phi.unsqueeze(0)
    denom = torch.logsumexp(scaled, dim=0)               # [m], over candidate features
    idx = torch.arange(features.shape[0], device=features.device)
    terms = denom[assignment] - scaled[idx, assignment]
    return terms.mean() if reduction == "mean" else terms.sum()


class PrototypeBank(nn.Module):
    """EMA-updated prototypes with concentration estimates acting as adaptive
    temperatures. Assignment is nearest prototype by cosine similarity."""

    def __init__(self, num_prototypes=16, dim=64, momentum=0.99,
                 phi_floor=0.05, phi_ceil=2.0, alpha=10.0):
        super().__init__()
        if num_prototypes < 1:
            raise ConfigurationError("need at least one prototype")
        self.momentum = momentum
        self.phi_floor = phi_floor
        self.phi_ceil = phi_ceil
        self.alpha = alpha
        proto = F.normalize(torch.randn(num_prototypes, dim), dim=-1)
        self.register_buffer("prototypes", proto)
        self.register_buffer("phi", torch.ones(num_prototypes))

    def assign(self, features):
        """Nearest prototype by cosine similarity -> [n] indices."""
        sim = F.normalize(features, dim=-1) @ F.normalize(self.prototypes, dim=-1).T
        return sim.argmax(dim=-1)

    @torch.no_grad()
    def estimate_concentration(self, features, assignment):
        """phi_j = sum_z ||z - p_j|| / (|A_j| log(|A_j| + alpha)), clamped.

        Prototypes with no assigned features keep their previous phi.
        """
        phi = self.phi.clone()
        for j in range(self.prototypes.shape[0]):
            sel = assignment == j
            n_j = int(sel.sum())
            if n_j == 0:
                continue
            dist = (features[sel] - self.prototypes[j]).norm(dim=-1).sum()
            phi[j] = float(dist) / (n_j * np.log(n_j + self.alpha))
        return phi.clamp(self.phi_floor, self.phi_ceil)

    @torch.no_grad()
    def update(self, features, assignment=None):
        if assignment is None:
            assignment = self.assign(features)
        for j in range(self.prototypes.shape[0]):
            sel = assignment == j
            if not bool(sel.any()):
                continue
            mean = F.normalize(features[sel].mean(dim=0), dim=-1)
            merged = self.momentum * self.prototypes[j] + (1 - self.momentum) * mean
            self.prototypes[j] = F.normalize(merged, dim=-1)
        self.phi.copy_(self.estimate_concentration(features, assignment))
        return assignment


def init_anchors_from_masks(mask_probs, threshold=0.5):
    """Tight normalized cxcywh boxes of thresholded masks.

    mask_probs: [K, H', W'] probabilities; empty thresholded masks fall back
    to the full-image box (0.5, 0.5, 1, 1).
    """
    if not (0 < threshold < 1):
        raise ConfigurationError(f"threshold must be in (0, 1), got {threshold}")
    if isinstance(mask_probs, torch.Tensor):
        arr = mask_probs.detach().cpu().numpy()
    else:
        arr = np.asarray(mask_probs)
    boxes = np.stack([mask_to_box(m >= threshold) for m in arr])
    return torch.as_tensor(boxes, dtype=torch.float32)
