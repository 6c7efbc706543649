"""Optimization engine: learning-rate schedules, weight EMA, versioned
checkpoints, the deterministic training loop, and batched evaluation.

Determinism contract: with a fixed seed and config, two runs produce the
same loss curve, and a run resumed from a checkpoint continues the
uninterrupted trajectory bit for bit.  All data-side randomness (batch
order, augmentation draws) is derived statelessly from (seed, epoch,
batch index), and the torch generator state rides inside the checkpoint,
so nothing depends on how the process got to a given step.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import tensorio
from .augment import AugSample, MixInfo, apply_policy, cutmix, mixup
from .boxes import BoundingBox
from .config import (RunConfig, ScheduleSection, build_policy, config_hash,
                     from_dict, to_dict, trajectory_hash, validate)
from .data import (EmbeddingTable, RefSample, Vocabulary, encode_expression,
                   iterate_batches, load_embeddings, random_embeddings, tokenize)
from .dethead import LossSpec, total_loss
from .metrics import EvalRecord, record
from .model import GroundingModel, sample_grids
from .visenc import letterbox

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def cosine_lr(progress: float, base_lr: float, min_lr_ratio: float = 0.01) -> float:
    """lr_min + 0.5 (base - lr_min) (1 + cos(pi * progress)), progress in [0, 1]."""
    progress = min(max(progress, 0.0), 1.0)
    lr_min = base_lr * min_lr_ratio
    return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + math.cos(math.pi * progress))


def lr_at(schedule: ScheduleSection, epoch: int, step: int = 0,
          steps_per_epoch: int | None = None) -> float:
    """Learning rate for (epoch, step); pure and side-effect free."""
    if epoch >= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} >= total_epochs {schedule.total_epochs}")
    if schedule.warmup_steps > 0 and steps_per_epoch:
        global_step = epoch * steps_per_epoch + step
        if global_step < schedule.warmup_steps:
            return schedule.base_lr * (global_step + 1) / schedule.warmup_steps
    if schedule.kind == "step":
        passed = sum(1 for m in schedule.step_epochs if epoch >= m)
        return schedule.base_lr * schedule.decay_factor ** passed
    frac = step / steps_per_epoch if steps_per_epoch else 0.0
    progress = (epoch + frac) / schedule.total_epochs
    return cosine_lr(progress, schedule.base_lr, schedule.min_lr_ratio)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def ema_update(shadow, params, decay: float):
    """shadow' = decay * shadow + (1 - decay) * params, elementwise.

    Accepts tensors or same-keyed dicts of tensors; integer entries (BN step
    counters) are taken from params verbatim.
    """
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay {decay} must be in [0, 1)")
    if isinstance(shadow, torch.Tensor):
        if shadow.shape != params.shape:
            raise ValueError(f"shape mismatch: {tuple(shadow.shape)} vs {tuple(params.shape)}")
        if not shadow.is_floating_point():
            return params.clone()
        return decay * shadow + (1.0 - decay) * params
    if shadow.keys() != params.keys():
        raise ValueError("shadow and params must have identical keys")
    return {k: ema_update(shadow[k], params[k], decay) for k in shadow}


class EmaTracker:
    """Shadow copy of the model state, updated after every optimizer step.

    The effective decay ramps in as min(decay, (1 + n) / (10 + n)) so early
    steps are not dominated by the random init.
    """

    def __init__(self, model: torch.nn.Module, decay: float = 0.9998, ramp: bool = True):
        self.decay = decay
        self.ramp = ramp
        self.updates = 0
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def effective_decay(self) -> float:
        if not self.ramp:
            return self.decay
        return min(self.decay, (1 + self.updates) / (10 + self.updates))

    def update(self, model: torch.nn.Module) -> None:
        d = self.effective_decay()
        with torch.no_grad():
            state = model.state_dict()
            self.shadow = {k: ema_update(self.shadow[k], state[k], d) for k in self.shadow}
        self.updates += 1

    def shadow_model(self, model: torch.nn.Module) -> torch.nn.Module:
        clone = copy.deepcopy(model)
        clone.load_state_dict(self.shadow)
        return clone


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, *, model: GroundingModel, optimizer, cfg: RunConfig,
                    vocab: Vocabulary, epoch: int, next_batch: int,
                    global_step: int, ema: EmaTracker | None = None,
                    best_accuracy: float | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        tensors[f"model.{name}"] = t.detach().cpu().numpy()
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    opt_state = optimizer.state_dict()
    for slot, name in enumerate(trainable):
        state = opt_state["state"].get(slot, {})
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim.{name}.{key}"] = value.detach().cpu().numpy()
            else:
                tensors[f"optim.{name}.{key}"] = np.asarray(value)
    if ema is not None:
        for name, t in ema.shadow.items():
            tensors[f"ema.{name}"] = t.detach().cpu().numpy()
    tensors["rng.torch"] = torch.get_rng_state().numpy()
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "trajectory_hash": trajectory_hash(cfg),
        "vocab": vocab.to_json(),
        "epoch": epoch,
        "next_batch": next_batch,
        "global_step": global_step,
        "optim_params": trainable,
        "optim_group": {
            k: v for k, v in opt_state["param_groups"][0].items() if k != "params"
        },
        "ema_updates": None if ema is None else ema.updates,
        "ema_enabled": ema is not None,
        "best_accuracy": best_accuracy,
    }
    tensorio.save_tensors(path, tensors, meta=meta)


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> RunConfig:
        return from_dict(self.meta["config"])

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.from_json(self.meta["vocab"])

    def model_state(self) -> dict[str, torch.Tensor]:
        return {
            name[len("model."):]: torch.from_numpy(arr.copy())
            for name, arr in self.tensors.items() if name.startswith("model.")
        }

    def ema_state(self) -> dict[str, torch.Tensor] | None:
        if not self.meta.get("ema_enabled"):
            return None
        return {
            name[len("ema."):]: torch.from_numpy(arr.copy())
            for name, arr in self.tensors.items() if name.startswith("ema.")
        }


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = tensorio.load_tensors(path)
    version = meta.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    return Checkpoint(meta=meta, tensors=tensors)


def build_model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = False):
    """Reconstruct (model, vocab, config) ready for inference."""
    cfg = ckpt.config
    vocab = ckpt.vocab
    emb = ckpt.tensors.get("model.textenc.embedding.weight")
    table = EmbeddingTable(matrix=np.array(emb, dtype=np.float32), source="checkpoint")
    cfg_local = copy.deepcopy(cfg)
    cfg_local.visenc.kind = "reference_small"  # weights come from the checkpoint
    model = GroundingModel(cfg_local, table)
    state = ckpt.ema_state() if use_ema else None
    model.load_state_dict(state if state is not None else ckpt.model_state())
    model.eval()
    return model, vocab, cfg


def _restore_optimizer(optimizer, model: GroundingModel, ckpt: Checkpoint) -> None:
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    if trainable != ckpt.meta["optim_params"]:
        raise CheckpointError("trainable parameter set differs from checkpoint")
    opt_state = optimizer.state_dict()
    group = dict(opt_state["param_groups"][0])
    group.update(ckpt.meta["optim_group"])
    group["params"] = opt_state["param_groups"][0]["params"]
    state = {}
    for slot, name in enumerate(trainable):
        prefix = f"optim.{name}."
        entries = {
            key[len(prefix):]: torch.from_numpy(arr.copy())
            for key, arr in ckpt.tensors.items() if key.startswith(prefix)
        }
        if entries:
            state[slot] = entries
    optimizer.load_state_dict({"state": state, "param_groups": [group]})


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def resolve_image_path(path: str, root: str | None) -> str:
    if os.path.isabs(path):
        return path
    root = root or os.environ.get("REFGROUNDER_DATA_ROOT")
    return os.path.join(root, path) if root else path


class ImageCache:
    """Decoded-image cache, FIFO-capped; datasets at desk scale fit whole."""

    def __init__(self, root: str | None, capacity: int = 1024):
        self.root = root
        self.capacity = capacity
        self._store: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._store:
            full = resolve_image_path(path, self.root)
            with Image.open(full) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            if len(self._store) >= self.capacity:
                self._store.pop(next(iter(self._store)))
            self._store[path] = arr
        return self._store[path]


def _batch_rng(seed: int, epoch: int, batch_idx: int, lane: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch_idx, lane])


def _snap_side(base: int, scale: float, snap: int) -> int:
    return max(snap, int(round(base * scale / snap)) * snap)


@dataclass
class PreparedBatch:
    images: torch.Tensor          # (B, 3, S, S)
    indices: torch.Tensor         # (B, L)
    valid_len: torch.Tensor       # (B,)
    boxes: list[BoundingBox]      # in the S-pixel frame
    mixes: list[MixInfo | None]
    sample_ids: list[str]
    side: int


def prepare_batch(samples: list[RefSample], vocab: Vocabulary, cfg: RunConfig,
                  cache: ImageCache, epoch: int = 0, batch_idx: int = 0,
                  augment: bool = False) -> PreparedBatch:
    """Load, letterbox, augment and tensorize one batch.

    When random resize is enabled the target side is drawn once per batch so
    the stacked tensor stays rectangular; all other per-sample draws come
    from generators derived from (seed, epoch, batch, lane).
    """
    rng = _batch_rng(cfg.seed, epoch, batch_idx)
    side = cfg.resolution
    a = cfg.augment
    if augment and a.random_resize:
        s = rng.uniform(*a.random_resize_range)
        side = _snap_side(cfg.resolution, s, a.random_resize_snap)

    policy = build_policy(a) if augment else None
    per_sample_specs = ()
    if policy is not None:
        per_sample_specs = tuple(
            t for t in policy.transforms
            if t.name not in ("random_resize", "mixup", "cutmix")
        )

    staged: list[AugSample] = []
    for i, sample in enumerate(samples):
        img = cache.get(sample.image_path)
        canvas, tf = letterbox(img, side)
        aug = AugSample(image=canvas, box=tf.apply_box(sample.gt_box),
                        expression=sample.expression)
        if per_sample_specs:
            aug = apply_policy(aug, type(policy)(per_sample_specs),
                               _batch_rng(cfg.seed, epoch, batch_idx, i + 1))
        staged.append(aug)

    finals: list[AugSample] = list(staged)
    if augment and (a.mixup or a.cutmix) and len(staged) > 1:
        op = mixup if a.mixup else cutmix
        params = {"beta_param": a.mixup_beta} if a.mixup else {"area_range": tuple(a.cutmix_area)}
        for i in range(len(staged)):
            lane_rng = _batch_rng(cfg.seed, epoch, batch_idx, 10_000 + i)
            if lane_rng.random() < 0.5:
                partner = staged[(i + 1) % len(staged)]
                finals[i] = op(staged[i], partner, lane_rng, **params)

    images = torch.from_numpy(
        np.stack([f.image for f in finals]).transpose(0, 3, 1, 2).copy()
    )
    seqs = [
        encode_expression(tokenize(s.expression), vocab, cfg.data.max_expression_len)
        for s in samples
    ]
    indices = torch.tensor([seq.indices for seq in seqs], dtype=torch.long)
    valid = torch.tensor([seq.valid_len for seq in seqs], dtype=torch.long)
    return PreparedBatch(
        images=images, indices=indices, valid_len=valid,
        boxes=[f.box for f in finals], mixes=[f.mix for f in finals],
        sample_ids=[s.image_id for s in samples], side=side,
    )


def batch_loss(model_grids, prepared: PreparedBatch, spec: LossSpec,
               center_radius: int = 0):
    """Mean over the batch of the per-sample summed objective."""
    from .dethead import assign_targets_multi

    totals, confs, boxes_ = [], [], []
    for b in range(prepared.images.shape[0]):
        grids = sample_grids(model_grids, b)
        assignment = assign_targets_multi(prepared.boxes[b], grids,
                                          center_radius=center_radius)
        mix = prepared.mixes[b]
        partner = None
        if mix is not None and spec.mix_dual_target:
            partner = assign_targets_multi(mix.partner_box, grids,
                                           center_radius=center_radius)
        total, parts = total_loss(grids, assignment, spec, mix=mix,
                                  partner_assignments=partner)
        totals.append(total)
        confs.append(parts["conf"])
        boxes_.append(parts["box"])
    n = len(totals)
    with torch.no_grad():
        conf_part = float(torch.stack(confs).detach().sum()) / n
        box_part = float(torch.stack(boxes_).detach().sum()) / n
    return torch.stack(totals).sum() / n, {"conf": conf_part, "box": box_part}


# ---------------------------------------------------------------------------
# evaluation and prediction
# ---------------------------------------------------------------------------

def predict_sample(model: GroundingModel, vocab: Vocabulary, cfg: RunConfig,
                   image: np.ndarray, expression: str) -> tuple[BoundingBox, float]:
    """One image + expression -> (box in original pixels, confidence)."""
    from .dethead import select_prediction

    tokens = tokenize(expression)
    seq = encode_expression(tokens, vocab, cfg.data.max_expression_len)
    canvas, tf = letterbox(image, cfg.resolution)
    images = torch.from_numpy(canvas.transpose(2, 0, 1)[None].copy())
    indices = torch.tensor([seq.indices], dtype=torch.long)
    valid = torch.tensor([seq.valid_len], dtype=torch.long)
    model.eval()
    with torch.no_grad():
        grids = model(images, indices, valid)
    box, conf = select_prediction(sample_grids(grids, 0))
    h, w = image.shape[:2]
    return tf.invert_box(box).clamped(w, h), conf


def evaluate(model: GroundingModel, samples: list[RefSample], vocab: Vocabulary,
             cfg: RunConfig, cache: ImageCache | None = None) -> list[EvalRecord]:
    """Batched inference over samples; IoU scored in original pixels."""
    from .dethead import select_prediction

    cache = cache or ImageCache(cfg.data.image_root)
    records: list[EvalRecord] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), cfg.data.batch_size):
            chunk = samples[start : start + cfg.data.batch_size]
            arrays = [cache.get(s.image_path) for s in chunk]
            boxed = [letterbox(a, cfg.resolution) for a in arrays]
            images = torch.from_numpy(
                np.stack([c for c, _ in boxed]).transpose(0, 3, 1, 2).copy()
            )
            seqs = [
                encode_expression(tokenize(s.expression), vocab,
                                  cfg.data.max_expression_len)
                for s in chunk
            ]
            indices = torch.tensor([q.indices for q in seqs], dtype=torch.long)
            valid = torch.tensor([q.valid_len for q in seqs], dtype=torch.long)
            grids = model(images, indices, valid)
            for b, sample in enumerate(chunk):
                pred, conf = select_prediction(sample_grids(grids, b))
                tf = boxed[b][1]
                h, w = arrays[b].shape[:2]
                pred = tf.invert_box(pred).clamped(w, h)
                records.append(record(sample.image_id, pred, sample.gt_box,
                                      expression=sample.expression,
                                      confidence=conf))
    return records


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    run_dir: Path
    loss_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    eval_history: list[dict] = field(default_factory=list)
    best_accuracy: float | None = None
    best_path: Path | None = None
    last_path: Path | None = None
    global_step: int = 0
    duration_s: float = 0.0
    model: GroundingModel | None = None
    vocab: Vocabulary | None = None
    ema: EmaTracker | None = None


def _build_embeddings(cfg: RunConfig, vocab: Vocabulary) -> EmbeddingTable:
    wants_glove = cfg.textenc.variant in ("lstm_glove", "lstm_glove_sa")
    if wants_glove and cfg.data.glove_path:
        return load_embeddings(vocab, cfg.data.glove_path, seed=cfg.seed,
                               dim=cfg.textenc.embed_dim)
    return random_embeddings(vocab, dim=cfg.textenc.embed_dim, seed=cfg.seed)


def _train_box_stats(samples: list[RefSample], cfg: RunConfig) -> np.ndarray | None:
    rows = []
    for s in samples:
        if s.width and s.height:
            scale = cfg.resolution / max(s.width, s.height)
            rows.append((s.gt_box.w * scale, s.gt_box.h * scale))
    return np.asarray(rows, dtype=np.float64) if rows else None


def train_loop(cfg: RunConfig, train_samples: list[RefSample],
               val_samples: list[RefSample] | None, run_dir,
               resume_from=None, eval_hook=None) -> TrainResult:
    """Full optimization: augment -> forward -> loss -> Adam -> EMA,
    epoch-end evaluation with EMA weights when enabled, best checkpoint
    retention, ndjson event log, NaN abort with a diagnostic dump."""
    for w in validate(cfg):
        log.warning("%s", w)
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    from .config import save_config
    save_config(cfg, run_dir / "config.json")

    usable = [s for s in train_samples if tokenize(s.expression)]
    if len(usable) < len(train_samples):
        log.warning("dropping %d samples with empty token streams",
                    len(train_samples) - len(usable))
    if not usable:
        raise ValueError("no usable training samples")

    torch.manual_seed(cfg.seed)
    vocab = Vocabulary.from_samples(usable)
    table = _build_embeddings(cfg, vocab)
    model = GroundingModel(cfg, table, train_boxes=_train_box_stats(usable, cfg))
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=cfg.schedule.base_lr,
                                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    ema = EmaTracker(model, decay=cfg.ema.decay) if cfg.ema.enabled else None

    start_epoch, start_batch, global_step = 0, 0, 0
    best_acc, best_path = None, None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.meta["trajectory_hash"] != trajectory_hash(cfg):
            raise CheckpointError("checkpoint was produced by a different config")
        model.load_state_dict(ckpt.model_state())
        _restore_optimizer(optimizer, model, ckpt)
        if ema is not None:
            shadow = ckpt.ema_state()
            if shadow is None:
                raise CheckpointError("checkpoint has no EMA state")
            ema.shadow = shadow
            ema.updates = ckpt.meta["ema_updates"]
        torch.set_rng_state(torch.from_numpy(ckpt.tensors["rng.torch"].copy()))
        start_epoch = ckpt.meta["epoch"]
        start_batch = ckpt.meta["next_batch"]
        global_step = ckpt.meta["global_step"]
        best_acc = ckpt.meta.get("best_accuracy")

    cache = ImageCache(cfg.data.image_root)
    spec = LossSpec(
        confidence=cfg.loss.confidence, box=cfg.loss.box,
        label_smooth_eps=cfg.loss.label_smooth_eps,
        focal_gamma=cfg.loss.focal_gamma, focal_alpha=cfg.loss.focal_alpha,
        mix_dual_target=cfg.loss.mix_dual_target,
    )
    steps_per_epoch = math.ceil(len(usable) / cfg.data.batch_size)
    result = TrainResult(run_dir=run_dir, global_step=global_step)
    events = open(run_dir / "events.ndjson", "a", encoding="utf-8")
    started = time.perf_counter()
    stop = False

    def checkpoint(path, epoch, next_batch):
        save_checkpoint(path, model=model, optimizer=optimizer, cfg=cfg,
                        vocab=vocab, epoch=epoch, next_batch=next_batch,
                        global_step=global_step, ema=ema, best_accuracy=best_acc)

    try:
        for epoch in range(start_epoch, cfg.schedule.total_epochs):
            batches = list(iterate_batches(
                usable, cfg.data.batch_size, shuffle=True,
                seed=cfg.seed * 1_000_003 + epoch,
            ))
            model.train()
            first_batch = start_batch if epoch == start_epoch else 0
            for batch_idx in range(first_batch, len(batches)):
                lr = lr_at(cfg.schedule, epoch, batch_idx, steps_per_epoch)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                prepared = prepare_batch(batches[batch_idx], vocab, cfg, cache,
                                         epoch=epoch, batch_idx=batch_idx,
                                         augment=True)
                grids = model(prepared.images, prepared.indices, prepared.valid_len)
                loss, parts = batch_loss(grids, prepared, spec,
                                         center_radius=cfg.head.center_radius)
                loss_value = float(loss.detach())
                if not torch.isfinite(loss):
                    dump = {
                        "step": global_step, "epoch": epoch, "lr": lr,
                        "batch_ids": prepared.sample_ids,
                        "loss": loss_value,
                        "loss_conf": parts["conf"], "loss_box": parts["box"],
                    }
                    with open(run_dir / "nan_dump.json", "w", encoding="utf-8") as fh:
                        json.dump(dump, fh, indent=2)
                    raise TrainingDivergedError(
                        f"non-finite loss at step {global_step}; see nan_dump.json"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(trainable, cfg.schedule.grad_clip_norm)
                optimizer.step()
                if ema is not None:
                    ema.update(model)
                global_step += 1
                result.loss_history.append(loss_value)
                result.lr_history.append(lr)
                events.write(json.dumps({
                    "step": global_step, "epoch": epoch, "lr": lr,
                    "loss": loss_value,
                    "loss_conf": parts["conf"], "loss_box": parts["box"],
                }) + "\n")
                if (cfg.schedule.max_steps is not None
                        and global_step >= cfg.schedule.max_steps):
                    stop = True
                    checkpoint(run_dir / "checkpoints" / "last.ckpt",
                               epoch, batch_idx + 1)
                    break

            if not stop and (val_samples or eval_hook):
                eval_model = ema.shadow_model(model) if ema is not None else model
                entry = {"epoch": epoch, "step": global_step}
                if eval_hook is not None:
                    entry["accuracy"] = float(eval_hook(eval_model, epoch))
                else:
                    records = evaluate(eval_model, val_samples, vocab, cfg, cache)
                    entry["accuracy"] = sum(r.iou >= 0.5 for r in records) / len(records)
                    if ema is not None:
                        raw = evaluate(model, val_samples, vocab, cfg, cache)
                        entry["accuracy_raw"] = sum(r.iou >= 0.5 for r in raw) / len(raw)
                result.eval_history.append(entry)
                events.write(json.dumps({"eval": entry}) + "\n")
                if best_acc is None or entry["accuracy"] >= best_acc:
                    best_acc = entry["accuracy"]
                    best_path = run_dir / "checkpoints" / "best.ckpt"
                    checkpoint(best_path, epoch + 1, 0)

            if stop:
                break
            every = cfg.schedule.checkpoint_every_epochs
            if every and (epoch + 1) % every == 0:
                checkpoint(run_dir / "checkpoints" / "last.ckpt", epoch + 1, 0)
        if not stop:
            checkpoint(run_dir / "checkpoints" / "last.ckpt",
                       cfg.schedule.total_epochs, 0)
    finally:
        events.close()

    result.global_step = global_step
    result.duration_s = time.perf_counter() - started
    result.best_accuracy = best_acc
    result.best_path = best_path
    result.last_path = run_dir / "checkpoints" / "last.ckpt"
    result.model = model
    result.vocab = vocab
    result.ema = ema
    return result


def hardware_label() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} ({os.cpu_count()} cores)"
