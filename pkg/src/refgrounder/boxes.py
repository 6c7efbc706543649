"""Axis-aligned bounding box type and geometry helpers.

The canonical box representation everywhere in this package is center form
(cx, cy, w, h); corner form (x1, y1, x2, y2) is derived on demand.  The
vectorized helpers at the bottom operate on numpy arrays of shape (..., 4)
and preserve the input dtype, so metric code can run them in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ABSOLUTE_PX = "absolute_px"
NORMALIZED_01 = "normalized_01"
_FRAMES = (ABSOLUTE_PX, NORMALIZED_01)


class BoxError(ValueError):
    """Raised for degenerate or out-of-frame boxes."""


@dataclass(frozen=True)
class BoundingBox:
    """One box in center form.  Width and height must be positive."""

    cx: float
    cy: float
    w: float
    h: float
    frame: str = ABSOLUTE_PX

    def __post_init__(self):
        if self.frame not in _FRAMES:
            raise BoxError(f"unknown coordinate frame {self.frame!r}")
        if not (self.w > 0 and self.h > 0):
            raise BoxError(f"degenerate box: w={self.w}, h={self.h}")
        if self.frame == NORMALIZED_01:
            for name in ("cx", "cy", "w", "h"):
                v = getattr(self, name)
                if not (0.0 <= v <= 1.0):
                    raise BoxError(f"normalized box field {name}={v} outside [0, 1]")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, frame: str = ABSOLUTE_PX) -> "BoundingBox":
        return cls(
            cx=(x1 + x2) / 2.0,
            cy=(y1 + y2) / 2.0,
            w=x2 - x1,
            h=y2 - y1,
            frame=frame,
        )

    @classmethod
    def from_xywh(cls, x1, y1, w, h, frame: str = ABSOLUTE_PX) -> "BoundingBox":
        """Top-left corner plus size, the manifest wire format."""
        return cls(cx=x1 + w / 2.0, cy=y1 + h / 2.0, w=w, h=h, frame=frame)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.w, self.h)

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return replace(self, cx=self.cx * sx, cy=self.cy * sy, w=self.w * sx, h=self.h * sy)

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return replace(self, cx=self.cx + dx, cy=self.cy + dy)

    def normalized(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            cx=self.cx / width,
            cy=self.cy / height,
            w=self.w / width,
            h=self.h / height,
            frame=NORMALIZED_01,
        )

    def absolute(self, width: float, height: float) -> "BoundingBox":
        if self.frame != NORMALIZED_01:
            raise BoxError("absolute() expects a normalized box")
        return BoundingBox(
            cx=self.cx * width,
            cy=self.cy * height,
            w=self.w * width,
            h=self.h * height,
            frame=ABSOLUTE_PX,
        )

    def inside(self, width: float, height: float, tol: float = 1e-6) -> bool:
        return (
            self.x1 >= -tol
            and self.y1 >= -tol
            and self.x2 <= width + tol
            and self.y2 <= height + tol
        )

    def clamped(self, width: float, height: float) -> "BoundingBox":
        x1 = min(max(self.x1, 0.0), width - 1.0)
        y1 = min(max(self.y1, 0.0), height - 1.0)
        x2 = min(max(self.x2, x1 + 1.0), width)
        y2 = min(max(self.y2, y1 + 1.0), height)
        return BoundingBox.from_corners(x1, y1, x2, y2, frame=self.frame)


def cxcywh_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes)
    half = boxes[..., 2:4] / 2.0
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def corners_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes)
    wh = boxes[..., 2:4] - boxes[..., 0:2]
    return np.concatenate([boxes[..., 0:2] + wh / 2.0, wh], axis=-1)


def iou_corners(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of corner-form boxes, broadcast over leading dims."""
    a = np.asarray(a)
    b = np.asarray(b)
    lt = np.maximum(a[..., 0:2], b[..., 0:2])
    rb = np.minimum(a[..., 2:4], b[..., 2:4])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_corners(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU: IoU minus enclosing-box slack, in (-1, 1]."""
    a = np.asarray(a)
    b = np.asarray(b)
    lt = np.maximum(a[..., 0:2], b[..., 0:2])
    rb = np.minimum(a[..., 2:4], b[..., 2:4])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    lt_c = np.minimum(a[..., 0:2], b[..., 0:2])
    rb_c = np.maximum(a[..., 2:4], b[..., 2:4])
    wh_c = np.clip(rb_c - lt_c, 0.0, None)
    enclose = wh_c[..., 0] * wh_c[..., 1]
    return iou - np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0)


def iou_wh(a_wh: np.ndarray, b_wh: np.ndarray) -> np.ndarray:
    """IoU of shape-only boxes aligned at a common center (anchor matching)."""
    a_wh = np.asarray(a_wh, dtype=np.float64)
    b_wh = np.asarray(b_wh, dtype=np.float64)
    inter = np.minimum(a_wh[..., 0], b_wh[..., 0]) * np.minimum(a_wh[..., 1], b_wh[..., 1])
    union = a_wh[..., 0] * a_wh[..., 1] + b_wh[..., 0] * b_wh[..., 1] - inter
    return inter / union


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(iou_corners(np.array(a.corners(), dtype=np.float64),
                             np.array(b.corners(), dtype=np.float64)))


def box_giou(a: BoundingBox, b: BoundingBox) -> float:
    return float(giou_corners(np.array(a.corners(), dtype=np.float64),
                              np.array(b.corners(), dtype=np.float64)))
