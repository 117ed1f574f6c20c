"""Training-only feature guide: rebuilds target-domain features from mixed features.

Source-dominated positions of a mixed feature map are replaced by a learnable
token, and a small transformer ("global aggregator") predicts a residual
offset that turns this initialization into a pseudo target feature map. Both
ends of the aggregator sit behind zero-initialized 1x1 projections, so a fresh
module is an exact identity on its input and early training cannot destabilize
the segmentation network it feeds.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class GuiderConfig:
    feature_dim: int = 128
    embed_dim: int = 512
    num_blocks: int = 2
    patch_size: int = 4
    num_heads: int = 8
    mlp_ratio: float = 4.0
    zero_init: bool = True        # ablation: random-init the 1x1 projections instead
    skip_connection: bool = True  # ablation: learn features directly, no residual

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.embed_dim % 4 != 0:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by 4 for the position table")
        if self.num_blocks < 0 or self.patch_size < 1 or self.feature_dim < 1:
            raise ValueError("invalid guider dimensions")


@functools.lru_cache(maxsize=32)
def _cosine_position_table(embed_dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D factorized sine/cosine table, (grid_h*grid_w, embed_dim)."""
    half = embed_dim // 2

    def axis_table(positions: np.ndarray) -> np.ndarray:
        omega = 1.0 / 10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half / 2.0))
        angles = np.outer(positions, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    table = np.concatenate([axis_table(ys.reshape(-1)), axis_table(xs.reshape(-1))], axis=1)
    table.setflags(write=False)
    return table


class _Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.to_qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class _Block(nn.Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class GlobalAggregator(nn.Module):
    """Patch embed -> cosine position encoding -> transformer blocks -> per-patch
    linear projection back to the original spatial/channel layout."""

    def __init__(self, config: GuiderConfig):
        super().__init__()
        self.config = config
        p, d, e = config.patch_size, config.feature_dim, config.embed_dim
        self.patch_embed = nn.Conv2d(d, e, kernel_size=p, stride=p)
        self.blocks = nn.ModuleList(
            _Block(e, config.num_heads, config.mlp_ratio) for _ in range(config.num_blocks)
        )
        self.norm = nn.LayerNorm(e)
        self.proj = nn.Linear(e, p * p * d)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        b, d, h, w = features.shape
        p = self.config.patch_size
        if h % p != 0 or w % p != 0:
            raise ValueError(f"feature grid {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p

        tokens = self.patch_embed(features).flatten(2).transpose(1, 2)  # (B, gh*gw, E)
        pos = torch.from_numpy(_cosine_position_table(self.config.embed_dim, gh, gw).copy())
        tokens = tokens + pos.to(dtype=tokens.dtype, device=tokens.device)
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.proj(self.norm(tokens))  # (B, gh*gw, p*p*D)

        out = tokens.reshape(b, gh, gw, p, p, d)
        return out.permute(0, 5, 1, 3, 2, 4).reshape(b, d, h, w)


class Guider(nn.Module):
    """Mixed features -> pseudo target features, learned as an offset."""

    def __init__(self, config: GuiderConfig):
        super().__init__()
        self.config = config
        d = config.feature_dim
        self.token = nn.Parameter(torch.empty(d))
        nn.init.trunc_normal_(self.token, std=0.02)
        self.z1 = nn.Conv2d(d, d, kernel_size=1)
        self.z2 = nn.Conv2d(d, d, kernel_size=1)
        if config.zero_init:
            for conv in (self.z1, self.z2):
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)
        self.gia = GlobalAggregator(config)

    @staticmethod
    def _as_mask(mask_scale: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        if mask_scale.dim() == 2:
            mask_scale = mask_scale.unsqueeze(0)
        if mask_scale.dim() == 3:
            mask_scale = mask_scale.unsqueeze(1)
        if mask_scale.shape[0] != features.shape[0] or mask_scale.shape[2:] != features.shape[2:]:
            raise ValueError(
                f"mask {tuple(mask_scale.shape)} does not match features {tuple(features.shape)}"
            )
        return mask_scale.to(dtype=features.dtype, device=features.device)

    def init_features(self, features_mixed: torch.Tensor, mask_scale: torch.Tensor) -> torch.Tensor:
        """Replace source-dominated positions with the learnable token:
        f_ini = m * token + (1 - m) * f_mixed, elementwise over the grid."""
        m = self._as_mask(mask_scale, features_mixed)
        token = self.token.view(1, -1, 1, 1)
        return m * token + (1.0 - m) * features_mixed

    def gia_forward(self, features_init: torch.Tensor) -> torch.Tensor:
        """Offset branch: z2(aggregate(z1(f_ini))). Zero at construction time."""
        return self.z2(self.gia(self.z1(features_init)))

    def reconstruct(
        self,
        features_mixed: torch.Tensor,
        mask_scale: torch.Tensor,
        skip_connection: bool | None = None,
    ) -> torch.Tensor:
        """Pseudo target features: offset + initialization (skip connection on by default)."""
        if skip_connection is None:
            skip_connection = self.config.skip_connection
        f_ini = self.init_features(features_mixed, mask_scale)
        offset = self.gia_forward(f_ini)
        return offset + f_ini if skip_connection else offset

    def forward(self, features_mixed: torch.Tensor, mask_scale: torch.Tensor) -> torch.Tensor:
        return self.reconstruct(features_mixed, mask_scale)
