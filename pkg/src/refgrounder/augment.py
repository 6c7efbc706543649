"""Box-consistent image augmentations.

Every transform is a pure function of (sample, params, rng state): the input
sample is never mutated, and feeding a generator in the same state twice
produces identical output.  Geometric transforms update the box analytically;
the photometric pool never touches geometry at all.

Horizontal flip and random crop invert or destroy spatial language ("left",
"right", cropped referents), so they ship disabled in every preset; flip
additionally raises a warning flag when the expression contains a word whose
meaning mirrors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .boxes import BoundingBox
from .data import tokenize

SPATIAL_FLIP_WORDS = frozenset({"left", "right", "leftmost", "rightmost"})

_MAX_PLACEMENT_TRIES = 10


class AugmentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MixInfo:
    """Mixing coefficient and the partner's box, for loss weighting."""

    lam: float
    partner_box: BoundingBox


@dataclass(frozen=True)
class AugSample:
    """Image (H, W, 3) float32 in [0, 1] plus its referent box and text."""

    image: np.ndarray
    box: BoundingBox
    expression: str = ""
    mix: MixInfo | None = None
    flags: tuple[str, ...] = ()


def _with(sample: AugSample, **kw) -> AugSample:
    return replace(sample, **kw)


# ---------------------------------------------------------------------------
# geometric transforms
# ---------------------------------------------------------------------------

def random_resize(sample: AugSample, rng: np.random.Generator,
                  scale_range=(0.6, 1.4), snap: int = 32) -> AugSample:
    """Uniformly rescale, snapping each output side to a multiple of snap.

    The box is scaled by the realized per-axis factors (after snapping), not
    by the raw draw, so box geometry stays exact.  A draw that would leave
    the box under one pixel on a side skips the transform.
    """
    lo, hi = scale_range
    if not (0 < lo <= hi):
        raise AugmentConfigError(f"bad scale_range {scale_range!r}")
    s = rng.uniform(lo, hi)
    h, w = sample.image.shape[:2]
    # ties round up (not banker's rounding) so the reachable sides are stable
    new_h = max(snap, int(math.floor(h * s / snap + 0.5)) * snap)
    new_w = max(snap, int(math.floor(w * s / snap + 0.5)) * snap)
    fy, fx = new_h / h, new_w / w
    box = sample.box
    if box.w * fx < 1.0 or box.h * fy < 1.0:
        return _with(sample)
    if (new_h, new_w) == (h, w):
        return _with(sample)
    image = cv2.resize(sample.image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    return _with(sample, image=np.ascontiguousarray(image), box=box.scaled(fx, fy))


def horizontal_flip(sample: AugSample) -> AugSample:
    """Mirror the image; cx maps to W - cx.  Flags mirrored spatial words."""
    h, w = sample.image.shape[:2]
    image = np.ascontiguousarray(sample.image[:, ::-1, :])
    box = replace(sample.box, cx=w - sample.box.cx)
    flags = sample.flags
    if set(tokenize(sample.expression)) & SPATIAL_FLIP_WORDS:
        flags = flags + ("flip_inverts_spatial_word",)
    return _with(sample, image=image, box=box, flags=flags)


def random_crop(sample: AugSample, rng: np.random.Generator,
                scale_range=(0.6, 1.0)) -> AugSample:
    """Keep a random sub-window; the box is clipped into it.

    A crop can truncate the referent or remove context the expression relies
    on, which is why this ships disabled; a crop that cuts the box raises a
    flag, and one that would drop the box center entirely is skipped.
    """
    lo, hi = scale_range
    if not (0 < lo <= hi <= 1):
        raise AugmentConfigError(f"bad scale_range {scale_range!r}")
    h, w = sample.image.shape[:2]
    ch = max(1, int(round(h * rng.uniform(lo, hi))))
    cw = max(1, int(round(w * rng.uniform(lo, hi))))
    for _ in range(_MAX_PLACEMENT_TRIES):
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        if x0 <= sample.box.cx < x0 + cw and y0 <= sample.box.cy < y0 + ch:
            break
    else:
        return _with(sample)
    image = np.ascontiguousarray(sample.image[y0 : y0 + ch, x0 : x0 + cw])
    x1 = max(sample.box.x1 - x0, 0.0)
    y1 = max(sample.box.y1 - y0, 0.0)
    x2 = min(sample.box.x2 - x0, float(cw))
    y2 = min(sample.box.y2 - y0, float(ch))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return _with(sample)
    flags = sample.flags
    if (x2 - x1) * (y2 - y1) < sample.box.area - 1e-6:
        flags = flags + ("crop_truncates_referent",)
    return _with(sample, image=image,
                 box=BoundingBox.from_corners(x1, y1, x2, y2), flags=flags)


def elastic_transform(sample: AugSample, rng: np.random.Generator,
                      alpha: float = 24.0, sigma: float = 8.0) -> AugSample:
    """Smooth random displacement field; box refit to the displaced hull.

    The hull is taken over the four corners and four edge midpoints of the
    original box, each moved by the local displacement.
    """
    if alpha < 0 or sigma <= 0:
        raise AugmentConfigError("alpha must be >= 0 and sigma > 0")
    if alpha == 0:
        return _with(sample, image=sample.image.copy())
    h, w = sample.image.shape[:2]
    dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = [ys + dy, xs + dx]
    image = np.empty_like(sample.image)
    for c in range(sample.image.shape[2]):
        image[..., c] = map_coordinates(sample.image[..., c], coords, order=1, mode="reflect")

    x1, y1, x2, y2 = sample.box.corners()
    xm, ym = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    points = [(x1, y1), (x2, y1), (x1, y2), (x2, y2),
              (xm, y1), (xm, y2), (x1, ym), (x2, ym)]
    moved = []
    for px, py in points:
        ix = int(np.clip(round(px), 0, w - 1))
        iy = int(np.clip(round(py), 0, h - 1))
        moved.append((px - dx[iy, ix], py - dy[iy, ix]))
    mx = [p[0] for p in moved]
    my = [p[1] for p in moved]
    nx1, ny1 = max(0.0, min(mx)), max(0.0, min(my))
    nx2, ny2 = min(float(w), max(mx)), min(float(h), max(my))
    if nx2 - nx1 < 1.0 or ny2 - ny1 < 1.0:
        return _with(sample, image=sample.image.copy())
    return _with(sample, image=image, box=BoundingBox.from_corners(nx1, ny1, nx2, ny2))


# ---------------------------------------------------------------------------
# photometric pool
# ---------------------------------------------------------------------------

def _luminance(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def _brightness(img, s, rng):
    factor = 1.0 + rng.choice([-1.0, 1.0]) * 0.9 * s
    return np.clip(img * factor, 0.0, 1.0)


def _contrast(img, s, rng):
    factor = 1.0 + rng.choice([-1.0, 1.0]) * 0.9 * s
    mean = _luminance(img).mean()
    return np.clip((img - mean) * factor + mean, 0.0, 1.0)


def _color(img, s, rng):
    factor = 1.0 + rng.choice([-1.0, 1.0]) * 0.9 * s
    gray = _luminance(img)[..., None]
    return np.clip(gray + factor * (img - gray), 0.0, 1.0)


def _sharpness(img, s, rng):
    factor = 1.0 + rng.choice([-1.0, 1.0]) * 0.9 * s
    blurred = cv2.blur(img, (3, 3))
    return np.clip(blurred + factor * (img - blurred), 0.0, 1.0)


def _equalize(img, s, rng):
    q = np.clip((img * 255.0).round(), 0, 255).astype(np.uint8)
    eq = np.empty_like(q)
    for c in range(q.shape[2]):
        hist = np.bincount(q[..., c].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        if nonzero.size <= 1:
            eq[..., c] = q[..., c]
            continue
        cdf = hist.cumsum()
        cdf_min = nonzero[0]
        lut = np.round((cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0).astype(np.uint8)
        eq[..., c] = lut[q[..., c]]
    eq_f = eq.astype(img.dtype) / 255.0
    return np.clip(img + s * (eq_f - img), 0.0, 1.0)


def _posterize(img, s, rng):
    bits = 8 - int(round(4 * s))
    shift = 8 - bits
    q = np.clip((img * 255.0).round(), 0, 255).astype(np.uint8)
    q = (q >> shift) << shift
    return q.astype(img.dtype) / 255.0


def _solarize(img, s, rng):
    threshold = 1.0 - s
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


_PHOTOMETRIC_POOL = (
    ("brightness", _brightness),
    ("contrast", _contrast),
    ("color", _color),
    ("sharpness", _sharpness),
    ("equalize", _equalize),
    ("posterize", _posterize),
    ("solarize", _solarize),
)


def rand_augment(sample: AugSample, rng: np.random.Generator,
                 n_ops: int = 2, magnitude: int = 9) -> AugSample:
    """Apply n_ops random photometric ops at the given magnitude (0..10).

    The pool is photometric only, so the box is returned untouched.
    Magnitude 0 is an exact identity.
    """
    if n_ops < 1:
        raise AugmentConfigError("n_ops must be >= 1")
    if not (0 <= magnitude <= 10):
        raise AugmentConfigError("magnitude must be in [0, 10]")
    if magnitude == 0:
        return _with(sample)
    s = magnitude / 10.0
    image = sample.image
    for _ in range(n_ops):
        _, op = _PHOTOMETRIC_POOL[int(rng.integers(len(_PHOTOMETRIC_POOL)))]
        image = op(image, s, rng).astype(np.float32)
    return _with(sample, image=image)


# ---------------------------------------------------------------------------
# occlusion / mixing transforms
# ---------------------------------------------------------------------------

def _sample_rect(rng, h, w, area_range, forbid_cx, forbid_cy):
    """Rectangle fully inside the image whose area fraction lies in
    area_range and which does not contain the forbidden point.  None after
    the placement budget is exhausted."""
    lo, hi = area_range
    for _ in range(_MAX_PLACEMENT_TRIES):
        frac = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
        rh = int(round(math.sqrt(frac * h * w / aspect)))
        rw = int(round(math.sqrt(frac * h * w * aspect)))
        if rh < 1 or rw < 1 or rh >= h or rw >= w:
            continue
        if not (lo <= (rh * rw) / (h * w) <= hi):
            continue
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        if y0 <= forbid_cy < y0 + rh and x0 <= forbid_cx < x0 + rw:
            continue
        return y0, x0, rh, rw
    return None


def random_erasing(sample: AugSample, rng: np.random.Generator,
                   area_range=(0.02, 0.2)) -> AugSample:
    """Fill one rectangle with noise; the rectangle must miss the box center
    so the referent stays locatable.  Skipped when no placement fits."""
    lo, hi = area_range
    if not (0 < lo <= hi < 1):
        raise AugmentConfigError(f"bad area_range {area_range!r}")
    h, w = sample.image.shape[:2]
    rect = _sample_rect(rng, h, w, area_range, sample.box.cx, sample.box.cy)
    if rect is None:
        return _with(sample)
    y0, x0, rh, rw = rect
    image = sample.image.copy()
    image[y0 : y0 + rh, x0 : x0 + rw] = rng.uniform(0, 1, (rh, rw, 3)).astype(np.float32)
    return _with(sample, image=image)


def mixup(sample_a: AugSample, sample_b: AugSample, rng: np.random.Generator,
          beta_param: float = 1.5) -> AugSample:
    """Blend images lam : (1 - lam); target box and expression stay a's."""
    if sample_a.image.shape != sample_b.image.shape:
        raise AugmentConfigError("mixup requires same-resolution images")
    lam = float(rng.beta(beta_param, beta_param))
    image = (lam * sample_a.image + (1.0 - lam) * sample_b.image).astype(np.float32)
    return _with(sample_a, image=image, mix=MixInfo(lam=lam, partner_box=sample_b.box))


def cutmix(sample_a: AugSample, sample_b: AugSample, rng: np.random.Generator,
           area_range=(0.1, 0.3)) -> AugSample:
    """Paste one rectangle of b into a, avoiding a's box center;
    lam = 1 - patch_area / image_area."""
    if sample_a.image.shape != sample_b.image.shape:
        raise AugmentConfigError("cutmix requires same-resolution images")
    lo, hi = area_range
    if not (0 < lo <= hi < 1):
        raise AugmentConfigError(f"bad area_range {area_range!r}")
    h, w = sample_a.image.shape[:2]
    rect = _sample_rect(rng, h, w, area_range, sample_a.box.cx, sample_a.box.cy)
    if rect is None:
        return _with(sample_a)
    y0, x0, rh, rw = rect
    image = sample_a.image.copy()
    image[y0 : y0 + rh, x0 : x0 + rw] = sample_b.image[y0 : y0 + rh, x0 : x0 + rw]
    lam = 1.0 - (rh * rw) / (h * w)
    return _with(sample_a, image=image, mix=MixInfo(lam=lam, partner_box=sample_b.box))


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

_SINGLE = {
    "random_resize": random_resize,
    "random_crop": random_crop,
    "elastic_transform": elastic_transform,
    "rand_augment": rand_augment,
    "random_erasing": random_erasing,
    "horizontal_flip": None,  # no rng
}
_MIXING = {"mixup": mixup, "cutmix": cutmix}
TRANSFORM_NAMES = tuple(_SINGLE) + tuple(_MIXING)


@dataclass(frozen=True)
class TransformSpec:
    name: str
    prob: float = 1.0
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AugmentPolicy:
    """Ordered list of transforms with independent fire probabilities."""

    transforms: tuple[TransformSpec, ...] = ()

    def __post_init__(self):
        names = [t.name for t in self.transforms]
        for name in names:
            if name not in TRANSFORM_NAMES:
                raise AugmentConfigError(
                    f"unknown transform {name!r}; known: {sorted(TRANSFORM_NAMES)}"
                )
        if len(set(names)) != len(names):
            raise AugmentConfigError("duplicate transform in policy")
        if "mixup" in names and "cutmix" in names:
            raise AugmentConfigError("at most one of mixup/cutmix may be enabled")


def apply_policy(sample: AugSample, policy: AugmentPolicy, rng: np.random.Generator,
                 partner: AugSample | None = None) -> AugSample:
    """Apply transforms in declared order; all randomness comes from rng.

    Transforms with prob >= 1 consume no fire draw, so a single-transform
    policy is stream-identical to calling the transform directly.  Mixing
    transforms are skipped when no partner sample is supplied.
    """
    out = sample
    for spec in policy.transforms:
        if spec.prob <= 0.0:
            continue
        if spec.prob < 1.0 and rng.random() >= spec.prob:
            continue
        if spec.name in _MIXING:
            if partner is None:
                continue
            out = _MIXING[spec.name](out, partner, rng, **spec.params)
        elif spec.name == "horizontal_flip":
            out = horizontal_flip(out, **spec.params)
        else:
            out = _SINGLE[spec.name](out, rng, **spec.params)
    return out
