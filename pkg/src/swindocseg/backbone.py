"""Hierarchical windowed-attention backbone producing a 4-level feature pyramid.

A trainable-from-scratch miniature: patch embedding at stride 4, stages of
window / shifted-window self-attention blocks, 2x2 patch merging between
stages. Outputs feature maps at strides 4, 8, 16, 32.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depths: tuple = (1, 1, 2, 1)
    heads: tuple = (2, 4, 8, 8)
    window_size: int = 8
    mlp_ratio: float = 2.0
    relative_position_bias: bool = False

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigurationError("depths and heads must have 4 stages")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h != 0:
                raise ConfigurationError(
                    f"stage {i}: heads={h} does not divide channels={self.embed_dim * 2**i}"
                )

    def stage_dim(self, i):
        return self.embed_dim * 2**i


def window_partition(x, window):
    """[B, H, W, C] -> [B*nW, window*window, C]; H, W must be multiples of window."""
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_unpartition(windows, window, H, W):
    B = windows.shape[0] // ((H // window) * (W // window))
    x = windows.view(B, H // window, W // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention within non-overlapping (optionally cyclically
    shifted) windows. Optional learned relative position bias."""

    def __init__(self, dim, heads, window, use_bias_table=False):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"heads={heads} does not divide dim={dim}")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        if use_bias_table:
            self.rel_bias = nn.Parameter(torch.zeros(heads, (2 * window - 1) ** 2))
            coords = torch.stack(torch.meshgrid(
                torch.arange(window), torch.arange(window), indexing="ij"), dim=-1).reshape(-1, 2)
            rel = coords[:, None] - coords[None, :] + window - 1
            self.register_buffer("rel_index", (rel[..., 0] * (2 * window - 1) + rel[..., 1]).long())
        else:
            self.rel_bias = None

    def attention_weights(self, x_windows):
        """[nW, T, C] -> softmax attention [nW, heads, T, T] (rows sum to 1)."""
        nW, T, C = x_windows.shape
        qkv = self.qkv(x_windows).reshape(nW, T, 3, self.heads, C // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (C // self.heads) ** -0.5
        if self.rel_bias is not None:
            attn = attn + self.rel_bias[:, self.rel_index]
        return attn.softmax(dim=-1), v

    def forward(self, x, shifted=False):
        """x: [B, H, W, C] with H, W multiples of the window size."""
        B, H, W, C = x.shape
        if H % self.window or W % self.window:
            raise ValueError(f"spatial dims {(H, W)} not multiples of window {self.window}")
        shift = self.window // 2 if shifted else 0
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        windows = window_partition(x, self.window)
        attn, v = self.attention_weights(windows)
        out = (attn @ v).transpose(1, 2).reshape(windows.shape)
        out = self.proj(out)
        x = window_unpartition(out, self.window, H, W)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        return x


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, window, shifted, mlp_ratio=2.0, use_bias_table=False):
        super().__init__()
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, use_bias_table)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x), shifted=self.shifted)
        x = x + self.mlp(self.norm2(x))
        return x


class PatchMerging(nn.Module):
    """2x2 neighborhood concat + linear projection: [B,H,W,C] -> [B,H/2,W/2,2C]."""

    def __init__(self, dim):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, 2 * dim)
        self.norm = nn.LayerNorm(4 * dim)

    def forward(self, x):
        B, H, W, C = x.shape
        x = x.view(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 2, 4, 5).reshape(B, H // 2, W // 2, 4 * C)
        return self.reduction(self.norm(x))


class SwinBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Conv2d(3, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s in range(4):
            dim = cfg.stage_dim(s)
            blocks = nn.ModuleList([
                SwinBlock(dim, cfg.heads[s], cfg.window_size, shifted=(b % 2 == 1),
                          mlp_ratio=cfg.mlp_ratio, use_bias_table=cfg.relative_position_bias)
                for b in range(cfg.depths[s])
            ])
            self.stages.append(blocks)
            if s < 3:
                self.merges.append(PatchMerging(dim))

    def patch_embed(self, image):
        """[B, 3, H, W] -> [B, embed_dim, H/4, W/4]; H, W must be multiples of 4."""
        H, W = image.shape[-2:]
        p = self.cfg.patch_size
        if H % p or W % p:
            raise ValueError(f"image dims {(H, W)} not multiples of patch size {p}")
        return self.patch_proj(image)

    def _pad_to_window(self, x):
        B, H, W, C = x.shape
        w = self.cfg.window_size
        ph = (-H) % w
        pw = (-W) % w
        if ph or pw:
            x = F.pad(x, (0, 0, 0, pw, 0, ph))
        return x, H, W

    def _run_stage(self, s, x):
        x, H, W = self._pad_to_window(x)
        for block in self.stages[s]:
            x = block(x)
        return x[:, :H, :W]

    def forward(self, image):
        """[B, 3, H, W] -> dict stride -> [B, C_s, H/stride, W/stride]."""
        x = self.patch_embed(image).permute(0, 2, 3, 1)  # [B, H/4, W/4, C]
        pyramid = {}
        for s in range(4):
            x = self._run_stage(s, x)
            pyramid[4 * 2**s] = x.permute(0, 3, 1, 2)
            if s < 3:
                x = self.merges[s](x)
        return pyramid
