"""Visual feature extraction: a small strided reference backbone plus the
contract (strides, channels, weight files) that external backbones plug into.

The reference backbone is five stride-2 stages, so stage outputs sit at
strides 2/4/8/16/32 with the channel schedule ending 256/512/1024.  It exists
to exercise every downstream shape contract at desk scale; production
backbones are loaded from weight containers through the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn as nn

from . import tensorio
from .boxes import BoundingBox

DEFAULT_CHANNELS = (32, 64, 256, 512, 1024)
MAX_STRIDE = 32


class BackboneConfigError(ValueError):
    pass


class WeightLoadError(Exception):
    pass


@dataclass
class PyramidLevel:
    stride: int
    features: torch.Tensor  # (B, C, H/stride, W/stride)


@dataclass
class FeaturePyramid:
    """Backbone levels ordered fine to coarse (strictly increasing stride)."""

    levels: list[PyramidLevel]

    def __post_init__(self):
        strides = [lv.stride for lv in self.levels]
        if strides != sorted(strides) or len(set(strides)) != len(strides):
            raise BackboneConfigError(f"strides must strictly increase, got {strides}")

    @property
    def strides(self) -> list[int]:
        return [lv.stride for lv in self.levels]


def check_resolution(resolution: int) -> None:
    if resolution % MAX_STRIDE != 0 or resolution < 2 * MAX_STRIDE:
        raise BackboneConfigError(
            f"input resolution {resolution} must be a multiple of {MAX_STRIDE} and >= {2 * MAX_STRIDE}"
        )


class ReferenceBackbone(nn.Module):
    """Five stride-2 conv stages; stage i output has stride 2**(i+1)."""

    def __init__(self, channels=DEFAULT_CHANNELS):
        super().__init__()
        if len(channels) != 5:
            raise BackboneConfigError("reference backbone needs 5 stage widths")
        self.channels = tuple(int(c) for c in channels)
        stages = []
        c_in = 3
        for c_out in self.channels:
            stages.append(nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(0.1, inplace=True),
            ))
            c_in = c_out
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return outputs

    def stage_channels(self) -> list[int]:
        return list(self.channels)


def extract_features(backbone: ReferenceBackbone, images: torch.Tensor,
                     scales_used: int) -> FeaturePyramid:
    """Run the backbone and keep the last ``scales_used`` stage outputs."""
    if not 1 <= scales_used <= 4:
        raise BackboneConfigError(f"scales_used must be in 1..4, got {scales_used}")
    if images.shape[-1] % MAX_STRIDE or images.shape[-2] % MAX_STRIDE:
        raise BackboneConfigError(
            f"image sides {tuple(images.shape[-2:])} must divide by {MAX_STRIDE}"
        )
    outputs = backbone(images)
    levels = []
    for i, feats in enumerate(outputs):
        stride = 2 ** (i + 1)
        if i >= len(outputs) - scales_used:
            levels.append(PyramidLevel(stride=stride, features=feats))
    return FeaturePyramid(levels=levels)


# ---------------------------------------------------------------------------
# external weights
# ---------------------------------------------------------------------------

@dataclass
class WeightLoadReport:
    loaded: list[str]
    unmatched: list[str]


def save_backbone_weights(path, backbone: nn.Module, meta: dict | None = None) -> None:
    tensors = {
        name: param.detach().cpu().numpy().astype(np.float32)
        for name, param in backbone.state_dict().items()
    }
    tensorio.save_tensors(path, tensors, meta=meta)


def load_external_weights(path, backbone: nn.Module,
                          format_tag: str = "rgtc") -> WeightLoadReport:
    """Fill the backbone from a weight container.

    Every declared layer must be present with the right shape; tensors in the
    file with no matching layer are reported, not silently dropped.
    """
    if format_tag != "rgtc":
        raise WeightLoadError(f"unknown weight format {format_tag!r}; supported: rgtc")
    tensors, _ = tensorio.load_tensors(path)
    state = backbone.state_dict()
    loaded, consumed = [], set()
    for name, target in state.items():
        if name not in tensors:
            raise WeightLoadError(f"weight file {path} is missing tensor {name!r}")
        src = tensors[name]
        if tuple(src.shape) != tuple(target.shape):
            raise WeightLoadError(
                f"shape mismatch for {name!r}: file {tuple(src.shape)}, "
                f"model {tuple(target.shape)}"
            )
        state[name] = torch.from_numpy(src.astype(np.float32)).to(target.dtype)
        loaded.append(name)
        consumed.add(name)
    backbone.load_state_dict(state)
    unmatched = sorted(set(tensors) - consumed)
    return WeightLoadReport(loaded=loaded, unmatched=unmatched)


# ---------------------------------------------------------------------------
# letterboxing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LetterboxTransform:
    """Aspect-preserving resize by ``scale`` plus (pad_x, pad_y) offsets."""

    scale: float
    pad_x: float
    pad_y: float
    out_size: int

    def apply_box(self, box: BoundingBox) -> BoundingBox:
        return box.scaled(self.scale, self.scale).shifted(self.pad_x, self.pad_y)

    def invert_box(self, box: BoundingBox) -> BoundingBox:
        return box.shifted(-self.pad_x, -self.pad_y).scaled(1.0 / self.scale, 1.0 / self.scale)


def letterbox(image: np.ndarray, out_size: int,
              fill: float = 0.5) -> tuple[np.ndarray, LetterboxTransform]:
    """Resize keeping aspect, pad to out_size x out_size with a flat fill."""
    h, w = image.shape[:2]
    scale = out_size / max(h, w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    if (new_h, new_w) != (h, w):
        resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    else:
        resized = image
    canvas = np.full((out_size, out_size, 3), fill, dtype=np.float32)
    pad_y = (out_size - new_h) // 2
    pad_x = (out_size - new_w) // 2
    canvas[pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    return canvas, LetterboxTransform(scale=scale, pad_x=float(pad_x), pad_y=float(pad_y),
                                      out_size=out_size)
