"""Evaluation: IoU accuracy, IoU histograms, expression-conditioned
breakdowns, and single-sample throughput.

IoU is always computed in original-image pixel coordinates; callers must
un-letterbox predictions before recording them so the metric is independent
of the network input resolution.
"""

from __future__ import annotations

import csv
import functools
import json
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .boxes import BoundingBox, box_iou
from .data import tokenize

HISTOGRAM_BINS = 10
DEFAULT_LENGTH_BUCKETS = ((1, 3), (4, 6), (7, 10), (11, None))


class MetricsError(ValueError):
    pass


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union via corner-form interval intersection."""
    return box_iou(a, b)


@dataclass
class EvalRecord:
    sample_id: str
    pred_box: BoundingBox
    gt_box: BoundingBox
    iou: float
    expression: str = ""
    confidence: float = 0.0
    expression_length: int = 0
    has_attribute_word: bool = False
    has_spatial_word: bool = False

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise MetricsError(f"iou {self.iou} outside [0, 1]")


def record(sample_id, pred_box, gt_box, expression="", confidence=0.0) -> EvalRecord:
    tokens = tokenize(expression)
    token_set = set(tokens)
    return EvalRecord(sample_id=str(sample_id), pred_box=pred_box, gt_box=gt_box,
                      iou=iou(pred_box, gt_box), expression=expression,
                      confidence=confidence,
                      expression_length=len(tokens),
                      has_attribute_word=bool(token_set & default_attribute_lexicon()),
                      has_spatial_word=bool(token_set & default_spatial_lexicon()))


def accuracy_at(records, tau: float = 0.5) -> float:
    if not records:
        raise MetricsError("accuracy over zero records is undefined")
    hits = sum(1 for r in records if r.iou >= tau)
    return hits / len(records)


def iou_histogram(records) -> list[int]:
    """Counts over [0, 0.1), ..., [0.8, 0.9), [0.9, 1.0]."""
    counts = [0] * HISTOGRAM_BINS
    for r in records:
        idx = min(int(r.iou * HISTOGRAM_BINS), HISTOGRAM_BINS - 1)
        counts[idx] += 1
    return counts


@functools.lru_cache(maxsize=None)
def _load_lexicon(name: str) -> frozenset[str]:
    text = (resources.files(__package__) / "lexicons" / name).read_text(encoding="utf-8")
    return frozenset(
        line.strip().lower() for line in text.splitlines()
        if line.strip() and not line.startswith("#")
    )


def default_attribute_lexicon() -> frozenset[str]:
    return _load_lexicon("attribute_words.txt")


def default_spatial_lexicon() -> frozenset[str]:
    return _load_lexicon("spatial_words.txt")


def _bucket_label(lo: int, hi: int | None) -> str:
    return f"{lo}-{hi}" if hi is not None else f"{lo}+"


def breakdown(records, attribute_lexicon=None, spatial_lexicon=None,
              length_buckets=DEFAULT_LENGTH_BUCKETS) -> dict:
    """Accuracy per expression bucket.  A record counts in every bucket it
    matches (attribute and spatial are not exclusive); empty buckets are
    omitted rather than reported as zero."""
    attribute_lexicon = attribute_lexicon or default_attribute_lexicon()
    spatial_lexicon = spatial_lexicon or default_spatial_lexicon()
    if not attribute_lexicon or not spatial_lexicon:
        raise MetricsError("lexicons must be nonempty")
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        tokens = tokenize(r.expression)
        token_set = set(tokens)
        if token_set & attribute_lexicon:
            groups.setdefault("attribute", []).append(r)
        if token_set & spatial_lexicon:
            groups.setdefault("spatial", []).append(r)
        for lo, hi in length_buckets:
            if len(tokens) >= lo and (hi is None or len(tokens) <= hi):
                groups.setdefault(f"length_{_bucket_label(lo, hi)}", []).append(r)
                break
    return {
        name: {"count": len(rs), "accuracy": accuracy_at(rs)}
        for name, rs in sorted(groups.items())
    }


@dataclass
class EvalReport:
    accuracy: dict[str, float]
    histogram: list[int]
    buckets: dict
    count: int
    samples_per_second: float | None = None
    hardware: str | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "accuracy": self.accuracy,
            "iou_histogram": self.histogram,
            "buckets": self.buckets,
            "timing": {
                "samples_per_second": self.samples_per_second,
                "hardware": self.hardware,
            },
            **self.extras,
        }


def build_report(records, thresholds=(0.5, 0.6, 0.7, 0.8, 0.9),
                 samples_per_second=None, hardware=None) -> EvalReport:
    if not records:
        raise MetricsError("cannot build a report from zero records")
    return EvalReport(
        accuracy={f"acc@{t:g}": accuracy_at(records, t) for t in thresholds},
        histogram=iou_histogram(records),
        buckets=breakdown(records),
        count=len(records),
        samples_per_second=samples_per_second,
        hardware=hardware,
    )


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_records_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "iou", "confidence",
                         "pred_cx", "pred_cy", "pred_w", "pred_h",
                         "gt_cx", "gt_cy", "gt_w", "gt_h",
                         "expression_length", "has_attribute_word",
                         "has_spatial_word", "expression"])
        for r in records:
            writer.writerow([
                r.sample_id, f"{r.iou:.6f}", f"{r.confidence:.6f}",
                f"{r.pred_box.cx:.2f}", f"{r.pred_box.cy:.2f}",
                f"{r.pred_box.w:.2f}", f"{r.pred_box.h:.2f}",
                f"{r.gt_box.cx:.2f}", f"{r.gt_box.cy:.2f}",
                f"{r.gt_box.w:.2f}", f"{r.gt_box.h:.2f}",
                r.expression_length, int(r.has_attribute_word),
                int(r.has_spatial_word), r.expression,
            ])


def save_plots(report: EvalReport, directory) -> list[str]:
    """Histogram and per-bucket bar charts as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(6, 4))
    edges = np.arange(HISTOGRAM_BINS + 1) / HISTOGRAM_BINS
    ax.bar(edges[:-1], report.histogram, width=0.1, align="edge", edgecolor="black")
    ax.set_xlabel("IoU")
    ax.set_ylabel("count")
    out = str(directory / "iou_histogram.png")
    fig.savefig(out, dpi=100, bbox_inches="tight")
    plt.close(fig)
    paths.append(out)

    if report.buckets:
        names = list(report.buckets)
        accs = [report.buckets[n]["accuracy"] for n in names]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(names)), accs, edgecolor="black")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylabel("accuracy")
        out = str(directory / "bucket_accuracy.png")
        fig.savefig(out, dpi=100, bbox_inches="tight")
        plt.close(fig)
        paths.append(out)
    return paths


def throughput(forward, iterations: int = 100, warmup: int = 10,
               clock=time.perf_counter) -> float:
    """Mean single-sample rate over timed forwards, warm-up excluded."""
    if iterations < 1:
        raise MetricsError("iterations must be >= 1")
    for _ in range(warmup):
        forward()
    start = clock()
    for _ in range(iterations):
        forward()
    elapsed = clock() - start
    if elapsed <= 0:
        raise MetricsError("clock did not advance")
    return iterations / elapsed
