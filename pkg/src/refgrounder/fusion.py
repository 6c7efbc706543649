"""Multimodal fusion: per-location gating of visual features by the pooled
text vector, bottom-up multi-scale aggregation, and a text-guided spatial
attention unit.

Gating computes relu(f_v @ W_v) * relu(f_t @ W_t) at every location; the text
gate is computed once per sample and broadcast over the grid.  The merge
convolutions and the attention output projection start at zero, so a fresh
stack is an exact identity on the coarsest gated map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .visenc import FeaturePyramid


class FusionConfigError(ValueError):
    pass


@dataclass
class FusedMap:
    grid: torch.Tensor  # (B, D, H, W)
    stride: int


class GatedFusion(nn.Module):
    """relu(f_v W_v) elementwise-times relu(f_t W_t), per spatial location."""

    def __init__(self, visual_channels: int, text_dim: int, dim: int):
        super().__init__()
        self.visual_proj = nn.Linear(visual_channels, dim, bias=False)
        self.text_proj = nn.Linear(text_dim, dim, bias=False)

    def forward(self, level: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
        # level: (B, C, H, W), f_t: (B, Dt)
        visual = torch.relu(self.visual_proj(level.permute(0, 2, 3, 1)))
        gate = torch.relu(self.text_proj(f_t))[:, None, None, :]
        return (visual * gate).permute(0, 3, 1, 2)


class MultiScaleFusion(nn.Module):
    """Bottom-up aggregation over k same-dim maps ordered fine to coarse.

    Each finer map is downsampled by a stride-2 conv, concatenated with the
    next coarser map, and folded back residually through a zero-initialized
    1x1 conv.  k = 1 passes the single map through untouched.
    """

    def __init__(self, dim: int, scales: int):
        super().__init__()
        if not scales >= 1:
            raise FusionConfigError("scales must be >= 1")
        self.scales = scales
        self.downs = nn.ModuleList(
            nn.Conv2d(dim, dim, 3, stride=2, padding=1, bias=False)
            for _ in range(scales - 1)
        )
        self.merges = nn.ModuleList(
            nn.Conv2d(2 * dim, dim, 1, bias=False) for _ in range(scales - 1)
        )
        for conv in self.merges:
            nn.init.zeros_(conv.weight)

    def forward(self, maps: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(maps) != self.scales:
            raise FusionConfigError(f"expected {self.scales} maps, got {len(maps)}")
        for fine, coarse in zip(maps, maps[1:]):
            if (fine.shape[-2] != 2 * coarse.shape[-2]
                    or fine.shape[-1] != 2 * coarse.shape[-1]):
                raise FusionConfigError(
                    f"adjacent maps must halve spatially, got {tuple(fine.shape[-2:])} "
                    f"then {tuple(coarse.shape[-2:])}"
                )
        merged = [maps[0]]
        for i in range(1, self.scales):
            down = self.downs[i - 1](merged[-1])
            fold = self.merges[i - 1](torch.cat([down, maps[i]], dim=1))
            merged.append(maps[i] + fold)
        return merged


class TextGuidedAttention(nn.Module):
    """Single-head scaled dot-product attention: the text vector queries the
    grid, and the attended context is added back residually under a
    per-location sigmoid gate.  The output projection starts at zero, so the
    unit is an identity until trained."""

    def __init__(self, dim: int, text_dim: int):
        super().__init__()
        self.dim = dim
        self.q_proj = nn.Linear(text_dim, dim)
        self.k_proj = nn.Conv2d(dim, dim, 1)
        self.v_proj = nn.Conv2d(dim, dim, 1)
        self.gate = nn.Conv2d(dim, dim, 1)
        self.out_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def attention_weights(self, fmap: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
        b, d, h, w = fmap.shape
        q = self.q_proj(f_t)                                  # (B, D)
        k = self.k_proj(fmap).reshape(b, d, h * w)            # (B, D, HW)
        scores = torch.einsum("bd,bdn->bn", q, k) / math.sqrt(self.dim)
        return torch.softmax(scores, dim=-1)                  # (B, HW)

    def forward(self, fmap: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
        b, d, h, w = fmap.shape
        weights = self.attention_weights(fmap, f_t)
        v = self.v_proj(fmap).reshape(b, d, h * w)
        context = torch.einsum("bn,bdn->bd", weights, v)
        injected = self.out_proj(context)[:, :, None, None]
        return fmap + torch.sigmoid(self.gate(fmap)) * injected


class FusionStack(nn.Module):
    """Gate each pyramid level with the text vector, aggregate bottom-up,
    then apply text-guided attention.  Returns the coarsest fused map, or all
    per-scale maps when multi-scale heads are attached."""

    def __init__(self, visual_channels: list[int], text_dim: int, dim: int,
                 use_attention: bool = True, keep_all_scales: bool = False):
        super().__init__()
        self.dim = dim
        self.keep_all_scales = keep_all_scales
        self.gates = nn.ModuleList(
            GatedFusion(c, text_dim, dim) for c in visual_channels
        )
        self.aggregate = MultiScaleFusion(dim, len(visual_channels))
        self.use_attention = use_attention
        n_out = len(visual_channels) if keep_all_scales else 1
        self.attend = nn.ModuleList(
            TextGuidedAttention(dim, text_dim) for _ in range(n_out)
        ) if use_attention else None

    def forward(self, pyramid: FeaturePyramid, f_t: torch.Tensor) -> list[FusedMap]:
        if len(pyramid.levels) != len(self.gates):
            raise FusionConfigError(
                f"stack built for {len(self.gates)} scales, pyramid has {len(pyramid.levels)}"
            )
        gated = [g(lv.features, f_t) for g, lv in zip(self.gates, pyramid.levels)]
        merged = self.aggregate(gated)
        if self.keep_all_scales:
            picked = list(zip(merged, pyramid.strides))
        else:
            picked = [(merged[-1], pyramid.strides[-1])]
        out = []
        for i, (fmap, stride) in enumerate(picked):
            if self.attend is not None:
                fmap = self.attend[i](fmap, f_t)
            out.append(FusedMap(grid=fmap, stride=stride))
        return out
