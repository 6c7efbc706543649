"""Command line entry points.

Subcommands: convert, train, eval, predict, ablate, bench.
Exit codes: 0 success, 1 validation failure, 2 runtime failure.
The environment variable REFGROUNDER_DATA_ROOT prefixes relative image paths.
"""

from __future__ import annotations

import argparse
import json
import pickle
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .augment import AugmentConfigError
from .boxes import BoxError
from .config import ConfigError, RunConfig
from .data import DataError, ManifestFormatError, Vocabulary, load_manifest, tokenize
from .dethead import HeadError
from .fusion import FusionConfigError
from .metrics import (MetricsError, build_report, export_records_csv,
                      save_plots, save_report, throughput)
from .model import GroundingModel
from .tensorio import ContainerError
from .trainer import (CheckpointError, ImageCache, TrainingDivergedError,
                      build_model_from_checkpoint, evaluate, hardware_label,
                      load_checkpoint, predict_sample, resolve_image_path,
                      train_loop)
from .visenc import BackboneConfigError

VALIDATION_ERRORS = (ConfigError, DataError, AugmentConfigError, HeadError,
                     BackboneConfigError, FusionConfigError, MetricsError,
                     BoxError, FileNotFoundError)
RUNTIME_ERRORS = (TrainingDivergedError, CheckpointError, ContainerError,
                  RuntimeError, OSError)

CONVERT_KINDS = ("refer", "weights")


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------

def _convert_refer(refs_path: Path, instances_path: Path, out_dir: Path) -> list[Path]:
    """REFER-style refs pickle + COCO-style instances json -> one manifest
    per split, byte-stable across reruns."""
    with open(refs_path, "rb") as fh:
        refs = pickle.load(fh)
    with open(instances_path, "r", encoding="utf-8") as fh:
        instances = json.load(fh)
    if not isinstance(refs, list) or "images" not in instances or "annotations" not in instances:
        raise ManifestFormatError(
            "unrecognized source layout; supported: REFER refs(*.p) + instances.json"
        )
    images = {img["id"]: img for img in instances["images"]}
    anns = {ann["id"]: ann for ann in instances["annotations"]}
    by_split: dict[str, list[dict]] = {}
    for ref in refs:
        img = images.get(ref["image_id"])
        ann = anns.get(ref["ann_id"])
        if img is None or ann is None:
            continue
        for sent in ref.get("sentences", []):
            expression = sent.get("sent") or sent.get("raw") or " ".join(sent.get("tokens", []))
            if not expression:
                continue
            by_split.setdefault(ref["split"], []).append({
                "image_id": str(ref["image_id"]),
                "image_path": img["file_name"],
                "expression": expression,
                "bbox": [float(v) for v in ann["bbox"]],
                "split": ref["split"],
                "width": int(img["width"]),
                "height": int(img["height"]),
            })
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for split in sorted(by_split):
        path = out_dir / f"manifest-{split}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(by_split[split], fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
    return written


def _convert_weights(src: Path, out: Path) -> None:
    import torch

    from .tensorio import save_tensors

    state = torch.load(src, map_location="cpu", weights_only=True)
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    tensors = {name: t.detach().cpu().numpy().astype(np.float32)
               for name, t in state.items()}
    save_tensors(out, tensors, meta={"source": str(src)})


def cmd_convert(args) -> int:
    if args.kind == "refer":
        if not (args.refs and args.instances):
            raise ConfigError("convert", "--kind refer needs --refs and --instances")
        written = _convert_refer(Path(args.refs), Path(args.instances), Path(args.out))
        for path in written:
            print(path)
        return 0
    if args.kind == "weights":
        if not args.src:
            raise ConfigError("convert", "--kind weights needs --src")
        _convert_weights(Path(args.src), Path(args.out))
        print(args.out)
        return 0
    raise ConfigError("convert.kind", f"unknown kind {args.kind!r}; supported: {CONVERT_KINDS}")


# ---------------------------------------------------------------------------
# shared config loading
# ---------------------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    if getattr(args, "preset", None):
        cfg = cfgmod.load_preset(args.preset)
    elif getattr(args, "config", None):
        cfg = cfgmod.load_config(args.config)
    else:
        cfg = RunConfig()
    overrides = list(getattr(args, "set", None) or [])
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    warnings = cfgmod.validate(cfg)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return cfg


def _load_split(manifest: str | None, split: str, what: str):
    if not manifest:
        raise ConfigError(f"data.{what}", "manifest path not set")
    loaded = load_manifest(manifest, split)
    if not loaded.samples:
        raise ConfigError(f"data.{what}", f"no samples for split {split!r} in {manifest}")
    return loaded.samples


# ---------------------------------------------------------------------------
# train / eval / predict
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    train_samples = _load_split(cfg.data.train_manifest, "train", "train_manifest")
    val_samples = None
    if cfg.data.val_manifest:
        val_samples = _load_split(cfg.data.val_manifest, "val", "val_manifest")
    result = train_loop(cfg, train_samples, val_samples, args.run_dir,
                        resume_from=args.resume)
    print(json.dumps({
        "run_dir": str(result.run_dir),
        "steps": result.global_step,
        "final_loss": result.loss_history[-1] if result.loss_history else None,
        "best_accuracy": result.best_accuracy,
        "duration_s": round(result.duration_s, 2),
    }))
    return 0


def cmd_eval(args) -> int:
    import time

    ckpt = load_checkpoint(args.checkpoint)
    model, vocab, cfg = build_model_from_checkpoint(ckpt, use_ema=args.ema)
    samples = _load_split(args.manifest, args.split, "eval_manifest")
    started = time.perf_counter()
    records = evaluate(model, samples, vocab, cfg,
                       ImageCache(args.image_root or cfg.data.image_root))
    elapsed = time.perf_counter() - started
    report = build_report(records,
                          samples_per_second=len(records) / elapsed,
                          hardware=hardware_label())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.json")
    export_records_csv(records, out / "records.csv")
    if args.plots:
        save_plots(report, out)
    print(f"accuracy@0.5: {report.accuracy['acc@0.5']:.4f}")
    return 0


def cmd_predict(args) -> int:
    if not tokenize(args.expression):
        raise ConfigError("expression", "empty after normalization")
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab, cfg = build_model_from_checkpoint(ckpt, use_ema=args.ema)
    from PIL import Image

    path = resolve_image_path(args.image, args.image_root)
    with Image.open(path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    box, conf = predict_sample(model, vocab, cfg, image, args.expression)
    print(json.dumps({
        "box_xywh": [round(v, 2) for v in box.to_xywh()],
        "box_cxcywh": [round(v, 2) for v in (box.cx, box.cy, box.w, box.h)],
        "confidence": round(conf, 4),
    }))
    if args.draw:
        from PIL import ImageDraw

        with Image.open(path) as im:
            canvas = im.convert("RGB")
        draw = ImageDraw.Draw(canvas)
        draw.rectangle([box.x1, box.y1, box.x2, box.y2], outline=(255, 0, 0), width=2)
        canvas.save(args.draw)
        print(args.draw)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _format_value(value) -> str:
    return json.dumps(value) if not isinstance(value, str) else value


def _run_one_ablation(base_cfg: RunConfig, axis: str, value, run_dir: Path) -> float:
    cfg = cfgmod.apply_overrides(base_cfg, [f"{axis}={json.dumps(value)}"])
    cfgmod.validate(cfg)
    train_samples = _load_split(cfg.data.train_manifest, "train", "train_manifest")
    val_samples = None
    if cfg.data.val_manifest:
        val_samples = _load_split(cfg.data.val_manifest, "val", "val_manifest")
    result = train_loop(cfg, train_samples, val_samples, run_dir)
    if result.best_accuracy is not None:
        return float(result.best_accuracy)
    eval_model = result.ema.shadow_model(result.model) if result.ema else result.model
    records = evaluate(eval_model, train_samples, result.vocab, cfg,
                       ImageCache(cfg.data.image_root))
    return sum(r.iou >= 0.5 for r in records) / len(records)


def _ablate_job(payload) -> float:
    base_dict, axis, value, run_dir = payload
    return _run_one_ablation(cfgmod.from_dict(base_dict), axis, value, Path(run_dir))


def cmd_ablate(args) -> int:
    base = _load_run_config(args)
    axis = args.axis
    base_value = cfgmod.get_path(base, axis)  # raises on a bad axis
    values = []
    for raw in args.values.split(","):
        try:
            values.append(json.loads(raw))
        except json.JSONDecodeError:
            values.append(raw)
    if not values:
        raise ConfigError("ablate.values", "need at least one value")

    sweep = Path(args.run_dir)
    tags = [f"{axis.replace('.', '_')}={_format_value(v)}" for v in values]
    dirs = [sweep / "runs" / tag for tag in tags]
    if args.jobs > 1:
        # runs are independent (isolated run dirs, same base seed); spawn
        # avoids forking a process that already has torch worker threads
        import multiprocessing
        from concurrent.futures import ProcessPoolExecutor

        payloads = [(cfgmod.to_dict(base), axis, v, str(d))
                    for v, d in zip(values, dirs)]
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=args.jobs, mp_context=ctx) as pool:
            accs = list(pool.map(_ablate_job, payloads))
    else:
        accs = [_run_one_ablation(base, axis, v, d) for v, d in zip(values, dirs)]
    rows = list(zip(values, accs))
    for tag, acc in zip(tags, accs):
        print(f"{tag}: accuracy@0.5 = {acc:.4f}")

    baseline_idx = next((i for i, (v, _) in enumerate(rows) if v == base_value), 0)
    baseline_acc = rows[baseline_idx][1]
    sweep.mkdir(parents=True, exist_ok=True)
    csv_path = sweep / "results.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("axis,choice,accuracy,delta\n")
        for value, acc in rows:
            delta = acc - baseline_acc
            fh.write(f"{axis},{_format_value(value)},{acc * 100:.2f},{delta * 100:+.2f}\n")
    print(csv_path)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    import torch

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        model, vocab, cfg = build_model_from_checkpoint(ckpt, use_ema=args.ema)
    else:
        cfg = _load_run_config(args)
        from .data import random_embeddings

        vocab = Vocabulary(["benchmark", "target"])
        model = GroundingModel(cfg, random_embeddings(vocab, cfg.textenc.embed_dim,
                                                      seed=cfg.seed))
        model.eval()
    rng = np.random.default_rng(cfg.seed)
    image = rng.uniform(0, 1, (cfg.resolution, cfg.resolution, 3)).astype(np.float32)
    expression = "benchmark target"

    def forward():
        with torch.no_grad():
            predict_sample(model, vocab, cfg, image, expression)

    fps = throughput(forward, iterations=args.iters, warmup=args.warmup)
    print(json.dumps({
        "samples_per_second": round(fps, 2),
        "iterations": args.iters,
        "warmup": args.warmup,
        "resolution": cfg.resolution,
        "hardware": hardware_label(),
    }))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refgrounder",
        description="One-stage referring-expression grounding toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert datasets or weights")
    p.add_argument("--kind", required=True, choices=CONVERT_KINDS)
    p.add_argument("--refs", help="REFER refs pickle")
    p.add_argument("--instances", help="COCO-style instances.json")
    p.add_argument("--src", help="torch state-dict file (weights kind)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    def add_config_args(q):
        q.add_argument("--config", help="run config JSON")
        q.add_argument("--preset", help=f"built-in preset ({', '.join(cfgmod.preset_names())})")
        q.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="dotted-path config override")

    p = sub.add_parser("train", help="run the training loop")
    add_config_args(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--plots", action="store_true")
    p.add_argument("--ema", action="store_true", help="evaluate the EMA weights")
    p.add_argument("--image-root")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="ground one expression in one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--expression", required=True)
    p.add_argument("--draw", help="write the image with the predicted box")
    p.add_argument("--ema", action="store_true")
    p.add_argument("--image-root")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="sweep one config axis")
    add_config_args(p)
    p.add_argument("--axis", required=True, help="dotted config path to vary")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="run sweep points concurrently")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="measure single-sample inference speed")
    add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--ema", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
