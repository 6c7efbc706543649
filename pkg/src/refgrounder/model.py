"""End-to-end grounding network assembled from a RunConfig: backbone ->
pyramid -> text-gated fusion -> detection head(s)."""

from __future__ import annotations

import importlib

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .data import EmbeddingTable
from .dethead import (ANCHOR_BASED, ANCHOR_FREE, AnchorSet, PredictionGrid,
                      default_anchor_sets, kmeans_anchors, load_anchor_file)
from .fusion import FusionStack
from .textenc import TextEncoder
from .visenc import (BackboneConfigError, ReferenceBackbone, check_resolution,
                     extract_features, load_external_weights)


class DetectionHead(nn.Module):
    """Per-scale conv tower emitting (B, H, W, n, 5) raw offsets."""

    def __init__(self, dim: int, n_anchors: int):
        super().__init__()
        self.n_anchors = n_anchors
        self.tower = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1, bias=False),
            nn.BatchNorm2d(dim),
            nn.LeakyReLU(0.1, inplace=True),
        )
        self.out = nn.Conv2d(dim, n_anchors * 5, 1)
        nn.init.zeros_(self.out.bias)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        b, _, h, w = fmap.shape
        raw = self.out(self.tower(fmap))
        return raw.reshape(b, self.n_anchors, 5, h, w).permute(0, 3, 4, 1, 2)


def resolve_plugin(spec: str):
    """Import a "module:attr" plug-in handle."""
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ValueError(f'plug-in spec {spec!r} must look like "module:attr"')
    return getattr(importlib.import_module(module_name), attr)


def resolve_anchors(cfg: RunConfig, strides: list[int],
                    train_boxes: np.ndarray | None = None) -> list[AnchorSet] | None:
    """Anchor priors per scale: from file, from k-means over training boxes,
    or the fixed fallback set scaled to the input resolution."""
    if cfg.head.paradigm == ANCHOR_FREE:
        return None
    if cfg.head.anchor_file:
        sets = load_anchor_file(cfg.head.anchor_file)
        if len(sets) != len(strides):
            raise BackboneConfigError(
                f"anchor file has {len(sets)} scales, model uses {len(strides)}"
            )
        return sets
    n = cfg.head.anchors_per_scale
    if train_boxes is not None and len(train_boxes) >= n * len(strides):
        clustered = kmeans_anchors(train_boxes, n * len(strides), seed=cfg.seed)
        return [AnchorSet(tuple(map(tuple, clustered[i * n : (i + 1) * n])))
                for i in range(len(strides))]
    return default_anchor_sets(strides, cfg.resolution)


class GroundingModel(nn.Module):
    def __init__(self, cfg: RunConfig, embeddings: EmbeddingTable,
                 train_boxes: np.ndarray | None = None):
        super().__init__()
        check_resolution(cfg.resolution)
        self.cfg = cfg
        self.backbone = ReferenceBackbone(cfg.visenc.channels)
        if cfg.visenc.kind == "external":
            if not cfg.visenc.weights_path:
                raise BackboneConfigError(
                    "visenc.kind=external requires visenc.weights_path"
                )
            load_external_weights(cfg.visenc.weights_path, self.backbone)
        self._frozen_backbone = cfg.visenc.freeze
        if self._frozen_backbone:
            self.backbone.requires_grad_(False)
            self.backbone.eval()

        external = None
        if cfg.textenc.external_encoder:
            external = resolve_plugin(cfg.textenc.external_encoder)
        self.textenc = TextEncoder(
            embeddings,
            hidden_dim=cfg.textenc.hidden_dim,
            sa_layers=cfg.textenc.sa_layers,
            heads=cfg.textenc.heads,
            dropout=cfg.textenc.dropout,
            freeze_embeddings=cfg.textenc.freeze_embeddings,
            external_encoder=external,
        )

        k = cfg.scales_used
        channels = self.backbone.stage_channels()[-k:]
        self.strides = [2 ** (5 - k + 1 + i) for i in range(k)]
        self.fusion = FusionStack(
            channels, cfg.textenc.hidden_dim, cfg.fusion.dim,
            use_attention=cfg.fusion.guided_attention,
            keep_all_scales=cfg.head.multi_scale_heads,
        )
        self.head_strides = self.strides if cfg.head.multi_scale_heads else [self.strides[-1]]
        n = cfg.head.anchors_per_scale if cfg.head.paradigm == ANCHOR_BASED else 1
        self.heads = nn.ModuleList(
            DetectionHead(cfg.fusion.dim, n) for _ in self.head_strides
        )
        anchor_sets = resolve_anchors(cfg, self.head_strides, train_boxes)
        self.base_anchors = anchor_sets  # None for anchor-free

    def train(self, mode: bool = True):
        super().train(mode)
        if self._frozen_backbone:
            self.backbone.eval()
        return self

    def anchors_at(self, resolution: int) -> list[AnchorSet] | None:
        if self.base_anchors is None:
            return None
        factor = resolution / self.cfg.resolution
        return [a.scaled(factor) for a in self.base_anchors]

    def forward(self, images: torch.Tensor, indices: torch.Tensor,
                valid_len: torch.Tensor) -> list[PredictionGrid]:
        """Images (B, 3, R, R) and token batches in, one batched grid per
        attached head out.  R may differ from the configured resolution (it
        still must divide by 32); anchors scale along with it."""
        pyramid = extract_features(self.backbone, images, self.cfg.scales_used)
        text = self.textenc(indices, valid_len)
        fused = self.fusion(pyramid, text.pooled)
        anchors = self.anchors_at(images.shape[-1])
        grids = []
        for i, (head, fmap) in enumerate(zip(self.heads, fused)):
            raw = head(fmap.grid)
            grids.append(PredictionGrid(
                raw=raw,
                stride=fmap.stride,
                paradigm=self.cfg.head.paradigm,
                anchors=None if anchors is None else anchors[i],
                literal_power=self.cfg.head.literal_power_decode,
            ))
        return grids


def sample_grids(grids: list[PredictionGrid], index: int) -> list[PredictionGrid]:
    """Slice one sample's unbatched grids out of a batched forward pass."""
    return [PredictionGrid(
        raw=g.raw[index], stride=g.stride, paradigm=g.paradigm,
        anchors=g.anchors, literal_power=g.literal_power,
    ) for g in grids]
