"""BEV-feature-to-vision-token compression.

A feature map [H, W, C] is cut into non-overlapping K x K patches; each
patch is summarized by one token through a single-query cross-attention
(the patch mean queries the patch cells), then linearly mapped to the
language-model width.  Attention never crosses patch boundaries, so token n
depends only on patch n.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
from einops import rearrange

from .errors import ShapeError


def patchify(f: torch.Tensor, k: int) -> torch.Tensor:
    """[..., H, W, C] -> [..., N, K*K, C] in row-major patch order."""
    h, w = f.shape[-3], f.shape[-2]
    if h % k or w % k:
        raise ShapeError(f"patch size {k} must divide H={h} and W={w}")
    return rearrange(f, "... (hp k1) (wp k2) c -> ... (hp wp) (k1 k2) c",
                     k1=k, k2=k)


def unpatchify(patches: torch.Tensor, h: int, w: int, k: int) -> torch.Tensor:
    """Exact inverse of `patchify` for the given output size."""
    n = patches.shape[-3]
    if n != (h // k) * (w // k) or h % k or w % k:
        raise ShapeError(f"{n} patches cannot tile a {h}x{w} map with K={k}")
    return rearrange(patches, "... (hp wp) (k1 k2) c -> ... (hp k1) (wp k2) c",
                     hp=h // k, k1=k, k2=k)


def pool_patches(patches: torch.Tensor) -> torch.Tensor:
    """Mean over the K*K cell axis, keeping a singleton query slot."""
    return patches.mean(dim=-2, keepdim=True)


class PatchCrossAttention(nn.Module):
    """Single-query attention inside each patch: pooled query, cell keys."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)

    def forward(self, pooled: torch.Tensor, patches: torch.Tensor,
                return_weights: bool = False):
        # pooled: [..., N, 1, C]; patches: [..., N, K*K, C].
        q = rearrange(self.q(pooled), "... n s (h d) -> ... n h s d", h=self.heads)
        k = rearrange(self.k(patches), "... n s (h d) -> ... n h s d", h=self.heads)
        v = rearrange(self.v(patches), "... n s (h d) -> ... n h s d", h=self.heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        logits = torch.matmul(q, k.transpose(-1, -2)) * scale
        weights = torch.softmax(logits, dim=-1)
        out = torch.matmul(weights, v)
        out = rearrange(out, "... n h s d -> ... n s (h d)").squeeze(-2)
        if return_weights:
            return out, weights
        return out


class SpatialProjector(nn.Module):
    """patchify -> mean-pool -> per-patch cross-attention -> linear."""

    def __init__(self, patch_size: int, channels: int, lm_width: int,
                 heads: int = 1):
        super().__init__()
        self.patch_size = patch_size
        self.channels = channels
        self.lm_width = lm_width
        self.attend = PatchCrossAttention(channels, heads=heads)
        self.out = nn.Linear(channels, lm_width)

    def num_tokens(self, h: int, w: int) -> int:
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"patch size {self.patch_size} must divide {h}x{w}")
        return (h // self.patch_size) * (w // self.patch_size)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        """[..., H, W, C] BEV features -> [..., N, lm_width] vision tokens."""
        if f.shape[-1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {f.shape[-1]}")
        if not torch.isfinite(f).all():
            raise ValueError("BEV features must be finite")
        patches = patchify(f, self.patch_size)
        attended = self.attend(pool_patches(patches), patches)
        return self.out(attended)

    def attention_weights(self, f: torch.Tensor) -> torch.Tensor:
        patches = patchify(f, self.patch_size)
        _, w = self.attend(pool_patches(patches), patches, return_weights=True)
        return w
