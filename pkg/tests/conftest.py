"""Shared fixtures: synthetic single-referent scenes, on-disk toy datasets,
and one session-scoped tiny-overfit training run reused by several tests."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from refgrounder.boxes import BoundingBox
from refgrounder.config import RunConfig, from_dict, to_dict, validate

# Colors are exact uint8 values so PNG round trips are lossless.
PALETTE = {
    "red": (204, 26, 26),
    "blue": (26, 26, 204),
    "green": (26, 178, 26),
    "yellow": (230, 230, 26),
}
BG_COLOR = (128, 128, 128)


@dataclass
class Scene:
    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    box: BoundingBox
    expression: str
    color: tuple[int, int, int]


def make_scene(rng: np.random.Generator, size: int = 128, color_name: str | None = None,
               min_side: int = 24, max_side: int = 56) -> Scene:
    """Uniform background plus one axis-aligned colored rectangle."""
    if color_name is None:
        color_name = list(PALETTE)[int(rng.integers(len(PALETTE)))]
    color = PALETTE[color_name]
    w = int(rng.integers(min_side, max_side + 1))
    h = int(rng.integers(min_side, max_side + 1))
    x1 = int(rng.integers(2, size - w - 2))
    y1 = int(rng.integers(2, size - h - 2))
    img = np.full((size, size, 3), BG_COLOR, dtype=np.uint8)
    img[y1 : y1 + h, x1 : x1 + w] = color
    return Scene(
        image=img.astype(np.float32) / 255.0,
        box=BoundingBox.from_xywh(x1, y1, w, h),
        expression=f"the {color_name} box",
        color=color,
    )


def referent_mask(image: np.ndarray, color: tuple[int, int, int],
                  tol: float = 0.08) -> np.ndarray:
    """Pixels within tol of the referent color on every channel."""
    target = np.asarray(color, dtype=np.float32) / 255.0
    return np.all(np.abs(image - target) < tol, axis=-1)


def box_coverage(image: np.ndarray, box: BoundingBox,
                 color: tuple[int, int, int], tol: float = 0.08) -> float:
    """Fraction of referent-colored pixels that fall inside the box."""
    mask = referent_mask(image, color, tol)
    total = int(mask.sum())
    if total == 0:
        return 0.0
    ys, xs = np.nonzero(mask)
    inside = ((xs + 0.5 >= box.x1) & (xs + 0.5 <= box.x2)
              & (ys + 0.5 >= box.y1) & (ys + 0.5 <= box.y2))
    return float(inside.sum()) / total


def write_dataset(directory: Path, n: int, size: int = 128, seed: int = 0,
                  split: str = "train", val_copy: bool = False) -> Path:
    """Render n scenes to PNG and emit a manifest; optionally duplicate the
    entries under the val split so the same images serve for evaluation."""
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        scene = make_scene(rng, size=size)
        path = directory / f"scene_{i:03d}.png"
        Image.fromarray((scene.image * 255).round().astype(np.uint8)).save(path)
        entry = {
            "image_id": f"scene_{i:03d}",
            "image_path": str(path),
            "expression": scene.expression,
            "bbox": list(scene.box.to_xywh()),
            "split": split,
            "width": size,
            "height": size,
        }
        entries.append(entry)
        if val_copy:
            entries.append({**entry, "split": "val"})
    manifest = directory / "manifest.json"
    with open(manifest, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2)
    return manifest


def tiny_config(manifest: Path, *, steps: int | None = 500, seed: int = 7,
                scales: int = 1, batch_size: int = 16) -> RunConfig:
    """Desk-scale config: 128 px input, narrow backbone, anchor-free head,
    IoU loss, constant lr, checkpoints only at the end of the run."""
    cfg = RunConfig()
    cfg.seed = seed
    cfg.resolution = 128
    cfg.scales_used = scales
    cfg.data.train_manifest = str(manifest)
    cfg.data.batch_size = batch_size
    cfg.data.max_expression_len = 8
    cfg.textenc.hidden_dim = 64
    cfg.textenc.heads = 4
    cfg.textenc.dropout = 0.0
    cfg.visenc.channels = (8, 16, 32, 64, 128)
    cfg.visenc.freeze = False
    cfg.fusion.dim = 64
    cfg.head.paradigm = "anchor_free"
    cfg.loss.box = "iou"
    cfg.schedule.base_lr = 2e-3
    cfg.schedule.kind = "step"
    cfg.schedule.step_epochs = ()
    cfg.schedule.total_epochs = 10_000
    cfg.schedule.max_steps = steps
    cfg.schedule.checkpoint_every_epochs = 0
    validate(cfg)
    return cfg


def clone_config(cfg: RunConfig) -> RunConfig:
    return from_dict(to_dict(cfg))


@dataclass
class TinyRun:
    cfg: RunConfig
    manifest: Path
    result: object  # TrainResult
    train_seconds: float


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory) -> TinyRun:
    """Train the 16-scene overfit model once per session (~1 min on CPU)."""
    from refgrounder.data import load_manifest
    from refgrounder.trainer import train_loop

    root = tmp_path_factory.mktemp("tiny_overfit")
    manifest = write_dataset(root / "data", 16, seed=3)
    cfg = tiny_config(manifest, steps=500)
    samples = load_manifest(manifest, "train").samples
    start = time.perf_counter()
    result = train_loop(cfg, samples, None, root / "run")
    elapsed = time.perf_counter() - start
    return TinyRun(cfg=cfg, manifest=manifest, result=result, train_seconds=elapsed)


def rasterized_iou(a: BoundingBox, b: BoundingBox, canvas: int = 64) -> float:
    """Independent pixel-count IoU oracle for integer-coordinate boxes."""
    grid_a = np.zeros((canvas, canvas), dtype=bool)
    grid_b = np.zeros((canvas, canvas), dtype=bool)
    ax1, ay1, ax2, ay2 = (int(v) for v in a.corners())
    bx1, by1, bx2, by2 = (int(v) for v in b.corners())
    grid_a[ay1:ay2, ax1:ax2] = True
    grid_b[by1:by2, bx1:bx2] = True
    inter = np.logical_and(grid_a, grid_b).sum()
    union = np.logical_or(grid_a, grid_b).sum()
    return float(inter) / float(union) if union else 0.0


def random_integer_box(rng, canvas: int = 64) -> BoundingBox:
    x1 = int(rng.integers(0, canvas - 1))
    y1 = int(rng.integers(0, canvas - 1))
    w = int(rng.integers(1, canvas - x1 + 1))
    h = int(rng.integers(1, canvas - y1 + 1))
    return BoundingBox.from_xywh(x1, y1, w, h)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {name}: {outcome}")
