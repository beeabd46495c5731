"""End-to-end document instance segmentation model.

Pipeline: windowed-attention backbone -> multi-scale token encoder ->
unified top-k query selection with contrastive projection heads and
mask-derived anchors -> anchor-refining decoder with denoising query groups
-> pixel-embedding-map mask prediction via class-instance mapping.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, SwinBackbone
from .queryselect import (EncoderHeads, LowProjection, PrototypeBank,
                          init_anchors_from_masks, loss_high, loss_low,
                          select_topk)
from .segbranch import ClassInstanceMapper, InstancePrediction, PixelDecoder, PixelEmbeddingMap, predict_masks
from .transformer import (CDNConfig, CDNQueries, Decoder, Encoder,
                          PositionalEmbedding2D, QuerySet, TokenSequence,
                          build_cdn_groups)

ENCODER_STRIDES = (8, 16, 32)  # stride 4 is reserved for the pixel embedding map


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    dim: int = 128
    mask_dim: int = 64
    low_dim: int = 32
    num_queries: int = 20
    enc_layers: int = 3
    dec_layers: int = 3
    num_heads: int = 4
    num_points: int = 4
    tau: float = 0.1
    num_prototypes: int = 16
    prototype_momentum: float = 0.99
    look_forward_twice: bool = True
    cdn: CDNConfig = field(default_factory=CDNConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


class SwinDocSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.backbone = SwinBackbone(cfg.backbone)
        self.input_proj = nn.ModuleDict({
            str(s): nn.Conv2d(cfg.backbone.stage_dim(i + 1), D, 1)
            for i, s in enumerate(ENCODER_STRIDES)
        })
        self.pos_embed = PositionalEmbedding2D(D, D)
        self.level_embed = nn.Parameter(torch.zeros(len(ENCODER_STRIDES), D))
        self.encoder = Encoder(D, cfg.enc_layers, cfg.num_heads,
                               num_levels=len(ENCODER_STRIDES), num_points=cfg.num_points)
        self.pixel_decoder = PixelDecoder(cfg.backbone.stage_dim(0), D, cfg.mask_dim)
        self.encoder_heads = EncoderHeads(D, cfg.num_classes, cfg.mask_dim)
        self.low_proj = LowProjection(D, cfg.low_dim)
        self.prototype_bank = PrototypeBank(cfg.num_prototypes, cfg.mask_dim,
                                            cfg.prototype_momentum)
        self.content_query = nn.Embedding(cfg.num_queries, D)
        self.label_embed = nn.Embedding(cfg.num_classes + 1, D)
        self.decoder = Decoder(D, cfg.dec_layers, cfg.num_heads,
                               num_levels=len(ENCODER_STRIDES), num_points=cfg.num_points,
                               look_forward_twice=cfg.look_forward_twice)
        self.mapper = ClassInstanceMapper(D, cfg.num_classes, cfg.mask_dim)

    # ---- pipeline pieces -------------------------------------------------

    def encode(self, images):
        """Backbone + encoder. Returns (pyramid, memory sequence, pem)."""
        pyramid = self.backbone(images)
        tokens, positions, shapes = [], [], []
        for lid, s in enumerate(ENCODER_STRIDES):
            fmap = self.input_proj[str(s)](pyramid[s])
            pos = self.pos_embed(fmap) + self.level_embed[lid].view(1, -1, 1, 1)
            B, D, h, w = fmap.shape
            tokens.append(fmap.flatten(2).transpose(1, 2))
            positions.append(pos.flatten(2).transpose(1, 2))
            shapes.append((h, w))
        seq = TokenSequence(torch.cat(tokens, dim=1), shapes,
                            list(range(len(ENCODER_STRIDES))), torch.cat(positions, dim=1))
        memory = self.encoder(seq)
        pem = self.pixel_decoder(pyramid[4], memory.level_map(0))
        return pyramid, memory, pem

    def select_queries(self, memory, pem):
        """Encoder heads + top-k unified selection + mask-derived anchors.

        Returns per-image dicts with encoder-stage predictions, projection
        embeddings, and initial decoder anchors.
        """
        heads = self.encoder_heads(memory)
        B = heads.class_logits.shape[0]
        out = []
        for b in range(B):
            sel = select_topk(heads.class_logits[b], self.cfg.num_queries)
            seg_feat = heads.seg_feat[b, sel]
            high = heads.mask_embed[b, sel]
            enc_masks = predict_masks(high, PixelEmbeddingMap(pem.pem[b]))
            anchors = init_anchors_from_masks(enc_masks.sigmoid(), 0.5)
            anchors = anchors.to(enc_masks.dtype).clamp(1e-4, 1 - 1e-4)
            # encoder-stage prediction: zero background logit appended
            logits = heads.class_logits[b, sel]
            logits = torch.cat([logits, logits.new_zeros(logits.shape[0], 1)], dim=-1)
            out.append({
                "selection": sel,
                "enc_pred": InstancePrediction(
                    class_logits=logits,
                    boxes=heads.boxes[b, sel],
                    mask_logits=enc_masks,
                ),
                "anchors": anchors,
                "f_det": self.low_proj(heads.det_feat[b, sel]),
                "f_seg": self.low_proj(seg_feat),
                "f_cand": self.low_proj(heads.class_feat[b, sel]),
                "f_high": high,
            })
        return heads, out

    def build_query_set(self, anchors, cdn: CDNQueries = None):
        """Matching queries (learnable content + selected anchors), with CDN
        groups prepended when given."""
        device = anchors.device
        dtype = anchors.dtype
        content = self.content_query.weight.to(dtype)
        K = content.shape[0]
        is_cdn = torch.zeros(K, dtype=torch.bool, device=device)
        group = torch.full((K,), -1, dtype=torch.long, device=device)
        polarity = torch.zeros(K, dtype=torch.long, device=device)
        if cdn is not None and len(cdn) > 0:
            cdn_content = self.label_embed(cdn.content_labels.to(device)).to(dtype)
            content = torch.cat([cdn_content, content], dim=0)
            anchors = torch.cat([cdn.anchors.to(device=device, dtype=dtype), anchors], dim=0)
            is_cdn = torch.cat([torch.ones(len(cdn), dtype=torch.bool, device=device), is_cdn])
            group = torch.cat([cdn.group.to(device), group])
            polarity = torch.cat([cdn.polarity.to(device), polarity])
        return QuerySet(content, anchors, is_cdn, group, polarity)

    # ---- forward ---------------------------------------------------------

    def forward(self, images, targets=None, mode="infer", rng=None,
                update_prototypes=None):
        """Run the full pipeline.

        In train mode with targets, builds denoising query groups and returns
        per-layer predictions for both matching and CDN queries plus the
        contrastive loss terms. targets: per-image dicts with "labels" [q],
        "boxes" [q, 4], "masks" [q, H, W].
        """
        if update_prototypes is None:
            update_prototypes = mode == "train"
        B = images.shape[0]
        pyramid, memory, pem = self.encode(images)
        heads, selected = self.select_queries(memory, pem)

        use_cdn = mode == "train" and targets is not None
        if use_cdn and rng is None:
            rng = np.random.default_rng(0)

        low_terms, high_terms = [], []
        layer_preds = [[] for _ in range(self.cfg.dec_layers)]
        cdn_layer_preds = [[] for _ in range(self.cfg.dec_layers)]
        cdn_list = []
        for b in range(B):
            sel = selected[b]
            cdn = None
            if use_cdn:
                t = targets[b]
                cdn = build_cdn_groups(
                    t["boxes"].detach().cpu().numpy(),
                    t["labels"].detach().cpu().numpy(),
                    self.cfg.cdn, self.cfg.num_classes, rng)
                cdn_list.append(cdn)
            qs = self.build_query_set(sel["anchors"], cdn)
            mem_b = TokenSequence(memory.tokens[b : b + 1], memory.spatial_shapes,
                                  memory.level_ids, memory.positions[b : b + 1])
            dec_out = self.decoder(qs, mem_b, mode=mode)
            n_cdn = 0 if cdn is None else len(cdn)
            pem_b = PixelEmbeddingMap(pem.pem[b])
            for li, (emb, boxes) in enumerate(dec_out):
                emb, boxes = emb[0], boxes[0]
                pred = self.mapper(emb.unsqueeze(0), boxes.unsqueeze(0),
                                   PixelEmbeddingMap(pem.pem[b : b + 1]))
                full = InstancePrediction(pred.class_logits[0], pred.boxes[0],
                                          pred.mask_logits[0])
                if n_cdn:
                    cdn_layer_preds[li].append(InstancePrediction(
                        full.class_logits[:n_cdn], full.boxes[:n_cdn],
                        full.mask_logits[:n_cdn]))
                    layer_preds[li].append(InstancePrediction(
                        full.class_logits[n_cdn:], full.boxes[n_cdn:],
                        full.mask_logits[n_cdn:]))
                else:
                    layer_preds[li].append(full)

            f_high = sel["f_high"]
            low_terms.append(loss_low(sel["f_det"], sel["f_seg"], sel["f_cand"], self.cfg.tau))
            assignment = self.prototype_bank.assign(f_high)
            # clone: the EMA update below mutates the bank buffers in place
            high_terms.append(loss_high(f_high,
                                        self.prototype_bank.prototypes.to(f_high.dtype).clone(),
                                        self.prototype_bank.phi.to(f_high.dtype).clone(),
                                        assignment))
            if update_prototypes:
                self.prototype_bank.update(f_high.detach().float(), assignment)

        return {
            "layers": layer_preds,
            "cdn_layers": cdn_layer_preds if use_cdn else [],
            "cdn": cdn_list,
            "encoder": [s["enc_pred"] for s in selected],
            "low_con": torch.stack(low_terms).mean(),
            "high_con": torch.stack(high_terms).mean(),
            "pem": pem,
            "selected": selected,
        }
