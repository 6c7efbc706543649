"""Detection head: raw-offset prediction grids, box decoding under both
paradigms, target assignment, the loss menu, and final box selection.

Decoding follows the one-stage convention: the center offset passes through
a sigmoid and lands inside the predicting cell, while width and height are
exponential.  Anchor-based grids scale a prior (p_w, p_h); anchor-free grids
scale the cell stride directly.  ``literal_power`` switches width decoding to
the power form p**exp(t), which agrees with the product form at t = 0 and is
kept for fidelity experiments (it needs p > 1 to be invertible).

All loss functions are written on torch tensors so autograd provides exact
analytic gradients; they reduce by sum over the h*w*n grid as the training
objective requires: sum_i c'_i * l_box_i + l_conf_i.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import BoundingBox, iou_wh

ANCHOR_BASED = "anchor_based"
ANCHOR_FREE = "anchor_free"

# Fallback priors per stride (pixels at 416 input), used when no training
# boxes are available for k-means.
DEFAULT_ANCHORS = {
    8: ((10.0, 13.0), (16.0, 30.0), (33.0, 23.0)),
    16: ((30.0, 61.0), (62.0, 45.0), (59.0, 119.0)),
    32: ((116.0, 90.0), (156.0, 198.0), (373.0, 326.0)),
    4: ((6.0, 8.0), (9.0, 16.0), (17.0, 12.0)),
}


class HeadError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    """Prior (p_w, p_h) pairs in pixels for one grid stride."""

    sizes: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.sizes) < 1:
            raise HeadError("anchor set needs at least one prior")
        for pw, ph in self.sizes:
            if not (pw > 0 and ph > 0):
                raise HeadError(f"anchor priors must be positive, got ({pw}, {ph})")

    def __len__(self) -> int:
        return len(self.sizes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sizes, dtype=np.float64)

    def scaled(self, factor: float) -> "AnchorSet":
        return AnchorSet(tuple((pw * factor, ph * factor) for pw, ph in self.sizes))


@dataclass
class PredictionGrid:
    """Raw head output (..., H, W, n, 5): t_x, t_y, t_w, t_h, confidence logit."""

    raw: torch.Tensor
    stride: int
    paradigm: str
    anchors: AnchorSet | None = None
    literal_power: bool = False

    def __post_init__(self):
        if self.paradigm not in (ANCHOR_BASED, ANCHOR_FREE):
            raise HeadError(f"unknown paradigm {self.paradigm!r}")
        if self.paradigm == ANCHOR_BASED:
            if self.anchors is None:
                raise HeadError("anchor-based grid needs an AnchorSet")
            if self.raw.shape[-2] != len(self.anchors):
                raise HeadError(
                    f"grid has n={self.raw.shape[-2]} slots but "
                    f"{len(self.anchors)} priors"
                )
        if self.paradigm == ANCHOR_FREE and self.raw.shape[-2] != 1:
            raise HeadError("anchor-free grid must have n = 1")
        if self.raw.shape[-1] != 5:
            raise HeadError("grid last dim must be 5")

    @property
    def n_anchors(self) -> int:
        return self.raw.shape[-2]

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.raw.shape[-4], self.raw.shape[-3]

    @property
    def conf_logits(self) -> torch.Tensor:
        return self.raw[..., 4]


def _anchor_wh(grid: PredictionGrid) -> torch.Tensor:
    arr = grid.anchors.as_array()
    return torch.as_tensor(arr, dtype=grid.raw.dtype, device=grid.raw.device)


def decode_grid(grid: PredictionGrid) -> torch.Tensor:
    """Decode every cell/anchor slot to (cx, cy, w, h) in pixels.

    cx = (sigmoid(t_x) + g_x) * stride, so the center stays strictly inside
    its cell; w = p_w * exp(t_w) (anchor-based) or stride * exp(t_w)
    (anchor-free).
    """
    raw = grid.raw
    h, w = grid.grid_hw
    dtype, device = raw.dtype, raw.device
    gx = torch.arange(w, dtype=dtype, device=device).view(1, w, 1)
    gy = torch.arange(h, dtype=dtype, device=device).view(h, 1, 1)
    cx = (torch.sigmoid(raw[..., 0]) + gx) * grid.stride
    cy = (torch.sigmoid(raw[..., 1]) + gy) * grid.stride
    if grid.paradigm == ANCHOR_BASED:
        priors = _anchor_wh(grid)  # (n, 2)
        if grid.literal_power:
            bw = priors[:, 0] ** torch.exp(raw[..., 2])
            bh = priors[:, 1] ** torch.exp(raw[..., 3])
        else:
            bw = priors[:, 0] * torch.exp(raw[..., 2])
            bh = priors[:, 1] * torch.exp(raw[..., 3])
    else:
        bw = torch.exp(raw[..., 2]) * grid.stride
        bh = torch.exp(raw[..., 3]) * grid.stride
    return torch.stack([cx, cy, bw, bh], dim=-1)


def encode_box(box_cxcywh, stride: int, cell: tuple[int, int], paradigm: str,
               anchor: tuple[float, float] | None = None,
               literal_power: bool = False,
               dtype=torch.float64,
               clamp_eps: float | None = None) -> torch.Tensor:
    """Inverse of decode_grid for one slot: pixel box -> raw offsets.

    A center exactly on a cell edge has no finite encoding (sigmoid is open
    on (0, 1)); pass clamp_eps to nudge such offsets inward, as target
    assignment does.  Without it, edge centers are an error.
    """
    cx, cy, bw, bh = (float(v) for v in box_cxcywh)
    gx, gy = cell
    fx = cx / stride - gx
    fy = cy / stride - gy
    if clamp_eps is not None:
        fx = min(max(fx, clamp_eps), 1.0 - clamp_eps)
        fy = min(max(fy, clamp_eps), 1.0 - clamp_eps)
    if not (0.0 < fx < 1.0 and 0.0 < fy < 1.0):
        raise HeadError(
            f"box center ({cx}, {cy}) does not fall inside cell {cell} at stride {stride}"
        )
    tx = math.log(fx / (1.0 - fx))
    ty = math.log(fy / (1.0 - fy))
    if paradigm == ANCHOR_BASED:
        if anchor is None:
            raise HeadError("anchor-based encoding needs a prior")
        pw, ph = anchor
        if literal_power:
            if pw <= 1.0 or ph <= 1.0:
                raise HeadError("literal power decode needs priors > 1")
            tw = math.log(math.log(bw) / math.log(pw))
            th = math.log(math.log(bh) / math.log(ph))
        else:
            tw = math.log(bw / pw)
            th = math.log(bh / ph)
    elif paradigm == ANCHOR_FREE:
        tw = math.log(bw / stride)
        th = math.log(bh / stride)
    else:
        raise HeadError(f"unknown paradigm {paradigm!r}")
    return torch.tensor([tx, ty, tw, th], dtype=dtype)


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

@dataclass
class AssignmentMap:
    """c' targets plus the regression target at the single positive slot."""

    conf: torch.Tensor              # (H, W, n) of {0, 1}
    pos: tuple[int, int, int] | None  # (gy, gx, a); None when another scale owns it
    t_target: torch.Tensor | None     # (4,) raw-space target
    box_target: torch.Tensor | None   # (4,) pixel-space cxcywh target

    @property
    def has_positive(self) -> bool:
        return self.pos is not None


def _center_cell(box: BoundingBox, stride: int, grid_h: int, grid_w: int) -> tuple[int, int]:
    gx = min(int(box.cx // stride), grid_w - 1)
    gy = min(int(box.cy // stride), grid_h - 1)
    return gx, gy


def match_anchor(anchors: AnchorSet, box: BoundingBox) -> int:
    """Best prior by shape IoU; ties go to the first index."""
    ious = iou_wh(anchors.as_array(), np.array([box.w, box.h], dtype=np.float64))
    return int(np.argmax(ious))


def assign_targets(box: BoundingBox, grid_hw: tuple[int, int], stride: int,
                   paradigm: str, anchors: AnchorSet | None = None,
                   literal_power: bool = False,
                   dtype=torch.float32, center_radius: int = 0) -> AssignmentMap:
    """One positive slot: the cell containing the box center, and for the
    anchor-based paradigm the highest-IoU prior within it.

    center_radius > 0 (experimental) marks neighboring cells as extra
    confidence positives; regression is still supervised only at the true
    center, since sigmoid offsets cannot reach outside a cell.
    """
    if box.w < 1e-6 or box.h < 1e-6:
        raise HeadError(f"degenerate ground-truth box ({box.w} x {box.h})")
    grid_h, grid_w = grid_hw
    gx, gy = _center_cell(box, stride, grid_h, grid_w)
    if paradigm == ANCHOR_BASED:
        n = len(anchors)
        a = match_anchor(anchors, box)
        anchor = anchors.sizes[a]
    else:
        n, a, anchor = 1, 0, None
    conf = torch.zeros(grid_h, grid_w, n, dtype=dtype)
    if center_radius > 0:
        y0, y1 = max(0, gy - center_radius), min(grid_h, gy + center_radius + 1)
        x0, x1 = max(0, gx - center_radius), min(grid_w, gx + center_radius + 1)
        conf[y0:y1, x0:x1, a] = 1.0
    conf[gy, gx, a] = 1.0
    t_target = encode_box((box.cx, box.cy, box.w, box.h), stride, (gx, gy),
                          paradigm, anchor=anchor, literal_power=literal_power,
                          dtype=torch.float64, clamp_eps=1e-6).to(dtype)
    box_target = torch.tensor([box.cx, box.cy, box.w, box.h], dtype=dtype)
    return AssignmentMap(conf=conf, pos=(gy, gx, a), t_target=t_target, box_target=box_target)


def assign_targets_multi(box: BoundingBox, grids: list[PredictionGrid],
                         dtype=torch.float32,
                         center_radius: int = 0) -> list[AssignmentMap]:
    """Pick the scale that best matches the box size, assign there, and emit
    all-negative maps for the other scales, keeping one positive overall."""
    if not grids:
        raise HeadError("no grids to assign to")
    if len(grids) == 1:
        g = grids[0]
        return [assign_targets(box, g.grid_hw, g.stride, g.paradigm, g.anchors,
                               g.literal_power, dtype=dtype,
                               center_radius=center_radius)]
    scores = []
    for g in grids:
        if g.paradigm == ANCHOR_BASED:
            best = float(np.max(iou_wh(g.anchors.as_array(),
                                       np.array([box.w, box.h], dtype=np.float64))))
            scores.append(best)
        else:
            # Most "native" scale: smallest raw-space size offsets.
            tw = math.log(box.w / g.stride)
            th = math.log(box.h / g.stride)
            scores.append(-(tw * tw + th * th))
    owner = int(np.argmax(scores))
    out = []
    for i, g in enumerate(grids):
        if i == owner:
            out.append(assign_targets(box, g.grid_hw, g.stride, g.paradigm,
                                      g.anchors, g.literal_power, dtype=dtype,
                                      center_radius=center_radius))
        else:
            h, w = g.grid_hw
            out.append(AssignmentMap(
                conf=torch.zeros(h, w, g.n_anchors, dtype=dtype),
                pos=None, t_target=None, box_target=None,
            ))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

CONF_VARIANTS = ("bce", "bce_label_smooth", "focal")
BOX_VARIANTS = ("mse_raw", "smooth_l1_raw", "iou", "giou")


def confidence_loss(logits: torch.Tensor, targets: torch.Tensor, variant: str = "bce",
                    label_smooth_eps: float = 0.1, focal_gamma: float = 2.0,
                    focal_alpha: float = 0.25) -> torch.Tensor:
    """Sum of the chosen binary loss over every grid entry."""
    if logits.shape != targets.shape:
        raise HeadError(f"shape mismatch: logits {tuple(logits.shape)}, "
                        f"targets {tuple(targets.shape)}")
    if variant == "bce":
        return F.binary_cross_entropy_with_logits(logits, targets, reduction="sum")
    if variant == "bce_label_smooth":
        # {0, 1} -> {eps/2, 1 - eps/2}
        smoothed = targets * (1.0 - label_smooth_eps) + label_smooth_eps / 2.0
        return F.binary_cross_entropy_with_logits(logits, smoothed, reduction="sum")
    if variant == "focal":
        log_p = F.logsigmoid(logits)
        log_q = F.logsigmoid(-logits)
        log_pt = targets * log_p + (1.0 - targets) * log_q
        pt = torch.exp(log_pt)
        alpha_t = targets * focal_alpha + (1.0 - targets) * (1.0 - focal_alpha)
        return (-alpha_t * (1.0 - pt) ** focal_gamma * log_pt).sum()
    raise HeadError(f"unknown confidence loss {variant!r}; known: {CONF_VARIANTS}")


def _corners(boxes: torch.Tensor) -> torch.Tensor:
    half = boxes[..., 2:4] / 2.0
    return torch.cat([boxes[..., 0:2] - half, boxes[..., 0:2] + half], dim=-1)


def iou_giou_torch(pred_cxcywh: torch.Tensor, target_cxcywh: torch.Tensor):
    """Differentiable IoU and GIoU of center-form boxes."""
    a = _corners(pred_cxcywh)
    b = _corners(target_cxcywh)
    lt = torch.maximum(a[..., 0:2], b[..., 0:2])
    rb = torch.minimum(a[..., 2:4], b[..., 2:4])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = pred_cxcywh[..., 2] * pred_cxcywh[..., 3]
    area_b = target_cxcywh[..., 2] * target_cxcywh[..., 3]
    union = area_a + area_b - inter
    iou = inter / union
    lt_c = torch.minimum(a[..., 0:2], b[..., 0:2])
    rb_c = torch.maximum(a[..., 2:4], b[..., 2:4])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclose = wh_c[..., 0] * wh_c[..., 1]
    giou = iou - (enclose - union) / enclose
    return iou, giou


def box_loss(pred, target, variant: str = "iou") -> torch.Tensor:
    """Regression loss at a positive slot.

    mse_raw / smooth_l1_raw compare raw offsets against encoded targets;
    iou / giou compare decoded pixel boxes, as their definitions require.
    """
    if variant == "mse_raw":
        return ((pred - target) ** 2).sum()
    if variant == "smooth_l1_raw":
        return F.smooth_l1_loss(pred, target, reduction="sum", beta=1.0)
    if variant == "iou":
        iou, _ = iou_giou_torch(pred, target)
        return (1.0 - iou).sum()
    if variant == "giou":
        _, giou = iou_giou_torch(pred, target)
        return (1.0 - giou).sum()
    raise HeadError(f"unknown box loss {variant!r}; known: {BOX_VARIANTS}")


_RAW_SPACE = ("mse_raw", "smooth_l1_raw")


@dataclass(frozen=True)
class LossSpec:
    confidence: str = "bce"
    box: str = "mse_raw"
    label_smooth_eps: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    mix_dual_target: bool = False


def _positive_box_term(grid: PredictionGrid, assignment: AssignmentMap,
                       spec: LossSpec, raw: torch.Tensor) -> torch.Tensor:
    gy, gx, a = assignment.pos
    if spec.box in _RAW_SPACE:
        pred = raw[gy, gx, a, :4]
        target = assignment.t_target.to(dtype=raw.dtype, device=raw.device)
        return box_loss(pred, target, spec.box)
    decoded = decode_grid(PredictionGrid(
        raw=raw, stride=grid.stride, paradigm=grid.paradigm,
        anchors=grid.anchors, literal_power=grid.literal_power,
    ))[gy, gx, a]
    target = assignment.box_target.to(dtype=raw.dtype, device=raw.device)
    return box_loss(decoded, target, spec.box)


def total_loss(grids, assignments, spec: LossSpec = LossSpec(),
               mix=None, partner_assignments=None):
    """sum_i c'_i * l_box_i + l_conf_i over all scales of one sample.

    ``grids`` are unbatched PredictionGrids (raw shape (H, W, n, 5)).  When a
    mixing augmentation fired, the box term at the base positive is weighted
    by lam; with mix_dual_target the partner's assignment contributes its own
    box term weighted 1 - lam.

    Returns (total, parts) with parts holding the conf and box components.
    """
    if isinstance(grids, PredictionGrid):
        grids = [grids]
    if isinstance(assignments, AssignmentMap):
        assignments = [assignments]
    if len(grids) != len(assignments):
        raise HeadError("one assignment per grid required")
    some = grids[0].raw
    conf_sum = some.new_zeros(())
    box_sum = some.new_zeros(())
    lam = 1.0 if mix is None else float(mix.lam)
    for i, (grid, assignment) in enumerate(zip(grids, assignments)):
        raw = grid.raw
        if raw.dim() != 4:
            raise HeadError("total_loss expects unbatched grids (H, W, n, 5)")
        targets = assignment.conf.to(dtype=raw.dtype, device=raw.device)
        conf_sum = conf_sum + confidence_loss(
            raw[..., 4], targets, spec.confidence,
            spec.label_smooth_eps, spec.focal_gamma, spec.focal_alpha,
        )
        if assignment.has_positive:
            box_sum = box_sum + lam * _positive_box_term(grid, assignment, spec, raw)
        if (mix is not None and spec.mix_dual_target
                and partner_assignments is not None
                and partner_assignments[i].has_positive):
            box_sum = box_sum + (1.0 - lam) * _positive_box_term(
                grid, partner_assignments[i], spec, raw)
    total = conf_sum + box_sum
    return total, {"conf": conf_sum, "box": box_sum}


# ---------------------------------------------------------------------------
# prediction selection
# ---------------------------------------------------------------------------

def select_prediction(grids) -> tuple[BoundingBox, float]:
    """Global confidence argmax across every cell, anchor and scale; ties go
    to the lowest flat index (scales concatenated in the given order)."""
    if isinstance(grids, PredictionGrid):
        grids = [grids]
    if not grids:
        raise HeadError("select_prediction needs at least one grid")
    flat = np.concatenate([
        g.conf_logits.detach().cpu().numpy().astype(np.float64).ravel() for g in grids
    ])
    best = int(np.argmax(flat))
    offset = 0
    for g in grids:
        h, w = g.grid_hw
        n = g.n_anchors
        size = h * w * n
        if best < offset + size:
            local = best - offset
            gy, rem = divmod(local, w * n)
            gx, a = divmod(rem, n)
            with torch.no_grad():
                decoded = decode_grid(g)[gy, gx, a]
                conf = float(torch.sigmoid(g.conf_logits[gy, gx, a]))
            cx, cy, bw, bh = (float(v) for v in decoded)
            return BoundingBox(cx=cx, cy=cy, w=bw, h=bh), conf
        offset += size
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# anchors: k-means and file IO
# ---------------------------------------------------------------------------

def kmeans_anchors(wh: np.ndarray, k: int, seed: int = 0, iters: int = 100) -> np.ndarray:
    """Cluster (w, h) pairs under 1 - IoU distance; returns k pairs sorted by
    area.  Falls back to quantile seeding for degenerate inputs."""
    wh = np.asarray(wh, dtype=np.float64)
    if wh.ndim != 2 or wh.shape[1] != 2 or len(wh) < k:
        raise HeadError(f"need at least {k} (w, h) rows")
    rng = np.random.default_rng(seed)
    centers = wh[rng.choice(len(wh), size=k, replace=False)].copy()
    for _ in range(iters):
        d = 1.0 - iou_wh(wh[:, None, :], centers[None, :, :])  # (N, k)
        labels = np.argmin(d, axis=1)
        moved = False
        for j in range(k):
            members = wh[labels == j]
            if len(members) == 0:
                centers[j] = wh[int(rng.integers(len(wh)))]
                moved = True
                continue
            new = np.median(members, axis=0)
            if not np.allclose(new, centers[j]):
                moved = True
            centers[j] = new
        if not moved:
            break
    order = np.argsort(centers[:, 0] * centers[:, 1])
    return centers[order]


def load_anchor_file(path) -> list[AnchorSet]:
    """JSON: one array of [p_w, p_h] pairs per scale, fine to coarse."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise HeadError(f"{path}: expected a per-scale list of [w, h] pairs")
    sets = []
    for scale in data:
        sets.append(AnchorSet(tuple((float(w), float(h)) for w, h in scale)))
    return sets


def default_anchor_sets(strides, resolution: int = 416) -> list[AnchorSet]:
    factor = resolution / 416.0
    sets = []
    for s in strides:
        if s not in DEFAULT_ANCHORS:
            raise HeadError(f"no fallback anchors for stride {s}")
        sets.append(AnchorSet(DEFAULT_ANCHORS[s]).scaled(factor))
    return sets
