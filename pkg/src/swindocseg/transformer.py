"""Deformable-attention encoder/decoder and contrastive denoising queries.

The encoder runs deformable self-attention over flattened multi-scale tokens.
The decoder refines box anchors layer by layer (inverse-sigmoid space), with
look-forward-twice gradient routing and group-isolated denoising queries.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import inverse_sigmoid


class ConfigurationError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


LOGIT_CLAMP = 8.0  # |inverse-sigmoid| clamp for anchor updates


# ---------------------------------------------------------------------------
# token plumbing


@dataclass
class TokenSequence:
    """Flattened multi-scale token sequence.

    level_ids maps sequence slot -> canonical level id, so attention
    parameters stay tied to the pyramid level, not to slot order.
    """

    tokens: torch.Tensor              # [B, N, D]
    spatial_shapes: list              # per slot (h, w)
    level_ids: list                   # per slot canonical level id
    positions: torch.Tensor = None    # [B, N, D]

    @property
    def level_index(self):
        idx = []
        for slot, (h, w) in enumerate(self.spatial_shapes):
            idx.extend([self.level_ids[slot]] * (h * w))
        return torch.tensor(idx, dtype=torch.long)

    def slot_slices(self):
        out = []
        start = 0
        for (h, w) in self.spatial_shapes:
            out.append((start, start + h * w))
            start += h * w
        return out

    def level_map(self, level_id):
        """Tokens of one canonical level reshaped to [B, D, h, w]."""
        for slot, lid in enumerate(self.level_ids):
            if lid == level_id:
                s, e = self.slot_slices()[slot]
                h, w = self.spatial_shapes[slot]
                return self.tokens[:, s:e].transpose(1, 2).reshape(
                    self.tokens.shape[0], -1, h, w)
        raise KeyError(f"level {level_id} not in sequence")


def grid_reference_points(spatial_shapes, device=None, dtype=torch.float32):
    """Normalized (x, y) cell centers for every token, concatenated per slot."""
    refs = []
    for h, w in spatial_shapes:
        ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        refs.append(torch.stack([gx, gy], dim=-1).reshape(-1, 2))
    return torch.cat(refs, dim=0)


class PositionalEmbedding2D(nn.Module):
    """Positional embedding from the feature map: two 3x3 convs with a nonlinearity."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(in_dim, out_dim, 3, padding=1)
        self.conv2 = nn.Conv2d(out_dim, out_dim, 3, padding=1)

    def forward(self, feature_map):
        return self.conv2(F.relu(self.conv1(feature_map)))


def bilinear_sample(feature_map, points):
    """Sample [C, h, w] at normalized (x, y) points [P, 2] -> [P, C].

    Zero padding outside [0, 1]^2; pixel centers at ((i+0.5)/w, (j+0.5)/h).
    Differentiable in both the map and the points.
    """
    C, h, w = feature_map.shape
    x = points[:, 0] * w - 0.5
    y = points[:, 1] * h - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    tx = x - x0
    ty = y - y0
    out = feature_map.new_zeros(points.shape[0], C)
    for dx, wx in ((0, 1 - tx), (1, tx)):
        for dy, wy in ((0, 1 - ty), (1, ty)):
            xi = (x0 + dx).long()
            yi = (y0 + dy).long()
            valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).to(feature_map.dtype)
            vals = feature_map[:, yi.clamp(0, h - 1), xi.clamp(0, w - 1)]  # [C, P]
            out = out + (vals * (wx * wy * valid)).transpose(0, 1)
    return out


# ---------------------------------------------------------------------------
# multi-scale deformable attention


class MSDeformAttn(nn.Module):
    """Predicts per-head sampling offsets and attention weights from the query,
    bilinearly samples the value pyramid, and mixes the samples."""

    def __init__(self, dim, num_heads=4, num_levels=3, num_points=4):
        super().__init__()
        if num_points < 1:
            raise ConfigurationError("num_points must be >= 1")
        if dim % num_heads != 0:
            raise ConfigurationError(f"num_heads={num_heads} does not divide dim={dim}")
        self.dim = dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.sampling_offsets = nn.Linear(dim, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset()

    def _reset(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        # spread initial sampling points around the reference
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2 * math.pi / self.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for p in range(self.num_points):
            grid[:, :, p] *= p + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)

    def forward(self, query, ref_points, value_seq: TokenSequence,
                forced_offsets=None, return_weights=False):
        """query [B, Q, D]; ref_points [B, Q, 2] (points) or [B, Q, 4] (boxes)."""
        if not value_seq.spatial_shapes:
            raise ConfigurationError("empty value pyramid")
        B, Q, D = query.shape
        M, L, K = self.num_heads, self.num_levels, self.num_points
        Dh = D // M

        value = self.value_proj(value_seq.tokens)  # [B, N, D]
        offsets = self.sampling_offsets(query).view(B, Q, M, L, K, 2)
        if forced_offsets is not None:
            offsets = forced_offsets
        weights = self.attention_weights(query).view(B, Q, M, L * K).softmax(-1)
        weights = weights.view(B, Q, M, L, K)

        if ref_points.shape[-1] == 4:
            center = ref_points[..., :2].unsqueeze(2).unsqueeze(3).unsqueeze(4)
            wh = ref_points[..., 2:].unsqueeze(2).unsqueeze(3).unsqueeze(4)
            locations = center + offsets / K * wh * 0.5  # [B, Q, M, L, K, 2]
        else:
            locations = None  # computed per level below (offsets scaled by level size)

        out = query.new_zeros(B, Q, M, Dh)
        slices = value_seq.slot_slices()
        for slot, (h, w) in enumerate(value_seq.spatial_shapes):
            lid = value_seq.level_ids[slot]
            s, e = slices[slot]
            v = value[:, s:e].view(B, h * w, M, Dh).permute(0, 2, 3, 1).reshape(B * M, Dh, h, w)
            if locations is None:
                scale = torch.tensor([w, h], dtype=query.dtype, device=query.device)
                loc = ref_points.unsqueeze(2).unsqueeze(3) + offsets[:, :, :, lid] / scale
            else:
                loc = locations[:, :, :, lid]  # [B, Q, M, K, 2]
            grid = (2 * loc - 1).permute(0, 2, 1, 3, 4).reshape(B * M, Q, K, 2)
            sampled = F.grid_sample(v, grid, mode="bilinear", padding_mode="zeros",
                                    align_corners=False)  # [B*M, Dh, Q, K]
            sampled = sampled.view(B, M, Dh, Q, K).permute(0, 3, 1, 4, 2)  # [B, Q, M, K, Dh]
            out = out + (sampled * weights[:, :, :, lid].unsqueeze(-1)).sum(dim=3)

        result = self.output_proj(out.reshape(B, Q, D))
        if return_weights:
            return result, weights
        return result


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# encoder


class EncoderLayer(nn.Module):
    def __init__(self, dim, num_heads, num_levels, num_points, ffn_dim):
        super().__init__()
        self.self_attn = MSDeformAttn(dim, num_heads, num_levels, num_points)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, seq: TokenSequence, refs):
        q = seq.tokens if seq.positions is None else seq.tokens + seq.positions
        attn = self.self_attn(q, refs, seq)
        tokens = self.norm1(seq.tokens + attn)
        tokens = self.norm2(tokens + self.ffn(tokens))
        return TokenSequence(tokens, seq.spatial_shapes, seq.level_ids, seq.positions)


class Encoder(nn.Module):
    def __init__(self, dim, num_layers, num_heads=4, num_levels=3, num_points=4, ffn_dim=None):
        super().__init__()
        ffn_dim = ffn_dim or 2 * dim
        self.layers = nn.ModuleList([
            EncoderLayer(dim, num_heads, num_levels, num_points, ffn_dim)
            for _ in range(num_layers)
        ])

    def forward(self, seq: TokenSequence):
        refs = grid_reference_points(seq.spatial_shapes, device=seq.tokens.device,
                                     dtype=seq.tokens.dtype)
        refs = refs.unsqueeze(0).expand(seq.tokens.shape[0], -1, -1)
        for layer in self.layers:
            seq = layer(seq, refs)
        return seq


# ---------------------------------------------------------------------------
# contrastive denoising queries


@dataclass(frozen=True)
class CDNConfig:
    lambda_p: float = 0.02
    lambda_e: float = 0.1
    num_groups: int = 2
    label_flip_prob: float = 0.2

    def __post_init__(self):
        if not (0 < self.lambda_p < self.lambda_e):
            raise ConfigurationError(
                f"need 0 < lambda_p < lambda_e, got {self.lambda_p}, {self.lambda_e}")
        if self.num_groups < 1:
            raise ConfigurationError("num_groups must be >= 1")


@dataclass
class CDNQueries:
    """Noised queries: per group, q positives then q negatives."""

    anchors: torch.Tensor        # [Ncdn, 4]
    content_labels: torch.Tensor  # [Ncdn] possibly flipped labels
    target_labels: torch.Tensor   # [Ncdn]; background class for negatives
    target_boxes: torch.Tensor    # [Ncdn, 4] GT box of the paired instance
    gt_index: torch.Tensor        # [Ncdn]
    group: torch.Tensor           # [Ncdn]
    polarity: torch.Tensor        # [Ncdn] +1 positive, -1 negative
    num_groups: int = 0
    num_gt: int = 0

    def __len__(self):
        return self.anchors.shape[0]


def _noised_box(box, scale, rng):
    cx, cy, w, h = box
    s = rng.choice([-1.0, 1.0], size=4)
    u = scale
    return np.array([
        cx + s[0] * u[0] * w / 2,
        cy + s[1] * u[1] * h / 2,
        w * (1 + s[2] * u[2]),
        h * (1 + s[3] * u[3]),
    ])


def build_cdn_groups(gt_boxes, gt_labels, cdn: CDNConfig, num_classes, rng):
    """Noised positive/negative query groups for the given ground truth.

    gt_boxes: [q, 4] normalized cxcywh (numpy); gt_labels: [q] ints.
    Positives perturb each coordinate with relative noise < lambda_p and keep
    (possibly flipped) GT labels; negatives use relative noise strictly inside
    (lambda_p, lambda_e) and target the background class for focal rejection.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    q = gt_boxes.shape[0]
    if q == 0:
        z = torch.zeros(0, dtype=torch.long)
        return CDNQueries(torch.zeros(0, 4), z, z.clone(), torch.zeros(0, 4),
                          z.clone(), z.clone(), z.clone(),
                          num_groups=cdn.num_groups, num_gt=0)

    anchors, content, targets, tb, gidx, grp, pol = [], [], [], [], [], [], []
    for g in range(cdn.num_groups):
        for polarity in (1, -1):
            for i in range(q):
                if polarity > 0:
                    scale = rng.uniform(0.0, cdn.lambda_p, size=4)
                else:
                    scale = rng.uniform(cdn.lambda_p, cdn.lambda_e, size=4)
                    while not np.all((scale > cdn.lambda_p) & (scale < cdn.lambda_e)):
                        scale = rng.uniform(cdn.lambda_p, cdn.lambda_e, size=4)
                box = np.clip(_noised_box(gt_boxes[i], scale, rng), 1e-4, 1 - 1e-4)
                label = int(gt_labels[i])
                if rng.uniform() < cdn.label_flip_prob:
                    label = int(rng.integers(0, num_classes))
                anchors.append(box)
                content.append(label)
                targets.append(int(gt_labels[i]) if polarity > 0 else num_classes)
                tb.append(gt_boxes[i])
                gidx.append(i)
                grp.append(g)
                pol.append(polarity)

    return CDNQueries(
        anchors=torch.tensor(np.array(anchors), dtype=torch.float32),
        content_labels=torch.tensor(content, dtype=torch.long),
        target_labels=torch.tensor(targets, dtype=torch.long),
        target_boxes=torch.tensor(np.array(tb), dtype=torch.float32),
        gt_index=torch.tensor(gidx, dtype=torch.long),
        group=torch.tensor(grp, dtype=torch.long),
        polarity=torch.tensor(pol, dtype=torch.long),
        num_groups=cdn.num_groups,
        num_gt=q,
    )


@dataclass
class QuerySet:
    """Decoder queries: learnable content + box anchors, incl. CDN groups."""

    content: torch.Tensor     # [Q, D] or [B, Q, D]
    anchors: torch.Tensor     # [Q, 4] or [B, Q, 4]
    is_cdn: torch.Tensor      # [Q] bool
    cdn_group: torch.Tensor   # [Q] int, -1 for matching queries
    cdn_polarity: torch.Tensor  # [Q] int, 0 for matching queries

    @property
    def num_queries(self):
        return self.is_cdn.shape[0]


def cdn_attention_mask(query_set: QuerySet):
    """Boolean [Q, Q] mask, True = attention not allowed.

    Matching queries and each CDN group form mutually isolated blocks.
    """
    group = query_set.cdn_group
    same_block = group.unsqueeze(0) == group.unsqueeze(1)
    return ~same_block


def validate_group_isolation(mask, query_set: QuerySet):
    """True iff the mask exactly matches block isolation of CDN groups."""
    return bool(torch.equal(mask, cdn_attention_mask(query_set)))


# ---------------------------------------------------------------------------
# decoder


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, num_layers):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class DecoderLayer(nn.Module):
    def __init__(self, dim, num_heads, num_levels, num_points, ffn_dim):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MSDeformAttn(dim, num_heads, num_levels, num_points)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.delta_head = MLP(dim, dim, 4, 3)
        nn.init.constant_(self.delta_head.layers[-1].weight, 0.0)
        nn.init.constant_(self.delta_head.layers[-1].bias, 0.0)

    def forward(self, x, anchor_pos, anchors, memory, attn_mask):
        q = k = x + anchor_pos
        sa, _ = self.self_attn(q, k, x, attn_mask=attn_mask, need_weights=False)
        x = self.norm1(x + sa)
        ca = self.cross_attn(x + anchor_pos, anchors, memory)
        x = self.norm2(x + ca)
        x = self.norm3(x + self.ffn(x))
        return x


class Decoder(nn.Module):
    """Anchor-refining decoder with optional look-forward-twice routing."""

    def __init__(self, dim, num_layers, num_heads=4, num_levels=3, num_points=4,
                 ffn_dim=None, look_forward_twice=True):
        super().__init__()
        ffn_dim = ffn_dim or 2 * dim
        self.layers = nn.ModuleList([
            DecoderLayer(dim, num_heads, num_levels, num_points, ffn_dim)
            for _ in range(num_layers)
        ])
        self.anchor_pos = MLP(4, dim, dim, 2)
        self.look_forward_twice = look_forward_twice

    def forward(self, query_set: QuerySet, memory: TokenSequence, mode="train"):
        """Returns per-layer (embeddings [B, Q, D], anchors-for-loss [B, Q, 4])."""
        if mode == "infer" and bool(query_set.is_cdn.any()):
            raise ContractViolation("CDN queries must be removed at inference")
        content, anchors = query_set.content, query_set.anchors
        if content.dim() == 2:
            content = content.unsqueeze(0)
            anchors = anchors.unsqueeze(0)
        attn_mask = cdn_attention_mask(query_set).to(content.device)

        x = content
        ref = anchors.detach()      # propagated (detached) reference
        ref_nodetach = anchors.detach()  # previous layer's undetached update
        outputs = []
        for layer in self.layers:
            pos = self.anchor_pos(ref)
            x = layer(x, pos, ref, memory, attn_mask)
            delta = layer.delta_head(x)
            base = inverse_sigmoid(ref).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
            new_ref = torch.sigmoid(base + delta)
            if self.look_forward_twice:
                base_loss = inverse_sigmoid(ref_nodetach).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
                boxes_for_loss = torch.sigmoid(base_loss + delta)
            else:
                boxes_for_loss = new_ref
            outputs.append((x, boxes_for_loss))
            ref_nodetach = new_ref
            ref = new_ref.detach()
        return outputs
