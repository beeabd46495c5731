"""Pixel embedding map construction and mask / class-instance prediction.

Masks are dot products between query embeddings and a fused quarter-resolution
per-pixel embedding built from the stride-4 backbone map and the upsampled
stride-8 encoder map.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .transformer import MLP


@dataclass
class PixelEmbeddingMap:
    pem: torch.Tensor  # [B, D_m, H/4, W/4]


@dataclass
class InstancePrediction:
    class_logits: torch.Tensor  # [B, Q, num_classes + 1] (background last)
    boxes: torch.Tensor         # [B, Q, 4]
    mask_logits: torch.Tensor   # [B, Q, H/4, W/4]


class PixelDecoder(nn.Module):
    """pem = seg_head( channel_map(S_b) + upsample2x(T_e8) ).

    channel_map is a 1x1 conv from backbone channels to the transformer dim,
    upsampling is bilinear 2x, and the segmentation head is two 3x3 convs with
    a nonlinearity followed by a 1x1 conv to the mask embedding dim.
    """

    def __init__(self, backbone_dim, dim, mask_dim):
        super().__init__()
        self.channel_map = nn.Conv2d(backbone_dim, dim, 1)
        self.seg_head = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1), nn.GELU(),
            nn.Conv2d(dim, dim, 3, padding=1), nn.GELU(),
            nn.Conv2d(dim, mask_dim, 1),
        )

    def forward(self, s_b, t_e8):
        """s_b: [B, C4, H/4, W/4]; t_e8: [B, D, H/8, W/8]."""
        up = F.interpolate(t_e8, scale_factor=2, mode="bilinear", align_corners=False)
        if up.shape[-2:] != s_b.shape[-2:]:
            raise ValueError(
                f"spatial mismatch after upsampling: {tuple(up.shape[-2:])} vs {tuple(s_b.shape[-2:])}")
        return PixelEmbeddingMap(pem=self.seg_head(self.channel_map(s_b) + up))


def predict_masks(query_embed, pem: PixelEmbeddingMap):
    """mask_logits[q, y, x] = sum_d query_embed[q, d] * pem[d, y, x].

    query_embed: [B, Q, D_m] or [Q, D_m]; returns matching batched/unbatched logits.
    """
    p = pem.pem if isinstance(pem, PixelEmbeddingMap) else pem
    if query_embed.dim() == 2:
        if query_embed.shape[-1] != p.shape[0]:
            raise ValueError(f"embedding dim {query_embed.shape[-1]} != pem dim {p.shape[0]}")
        return torch.einsum("qd,dyx->qyx", query_embed, p)
    if query_embed.shape[-1] != p.shape[1]:
        raise ValueError(f"embedding dim {query_embed.shape[-1]} != pem dim {p.shape[1]}")
    return torch.einsum("bqd,bdyx->bqyx", query_embed, p)


class ClassInstanceMapper(nn.Module):
    """One-to-one mapping from each decoder query embedding to its class
    logits, refined box, and mask."""

    def __init__(self, dim, num_classes, mask_dim):
        super().__init__()
        self.class_head = nn.Linear(dim, num_classes + 1)
        self.mask_embed = MLP(dim, dim, mask_dim, 3)

    def forward(self, embeddings, boxes, pem: PixelEmbeddingMap):
        """embeddings: [B, Q, D]; boxes: [B, Q, 4] refined anchors."""
        return InstancePrediction(
            class_logits=self.class_head(embeddings),
            boxes=boxes,
            mask_logits=predict_masks(self.mask_embed(embeddings), pem),
        )


def filter_instances(pred: InstancePrediction, score_threshold=0.5,
                     drop_background=True):
    """Inference filter: drop background-argmax queries, return per-image lists
    of (class_id, score, box, mask_logits) with score from softmax excl. background.

    drop_background=False keeps every query above the score threshold ranked by
    foreground score, the usual setting for AP evaluation of set-prediction heads.
    """
    probs = pred.class_logits.softmax(dim=-1)
    results = []
    for b in range(probs.shape[0]):
        keep = []
        fg = probs[b, :, :-1]
        labels = fg.argmax(dim=-1)
        scores = fg.max(dim=-1).values
        not_bg = probs[b].argmax(dim=-1) != probs.shape[-1] - 1
        for q in range(probs.shape[1]):
            if (not_bg[q] or not drop_background) and scores[q] >= score_threshold:
                keep.append({
                    "class_id": int(labels[q]),
                    "score": float(scores[q]),
                    "box": pred.boxes[b, q].detach().cpu().numpy(),
                    "mask_logits": pred.mask_logits[b, q].detach(),
                })
        results.append(keep)
    return results
