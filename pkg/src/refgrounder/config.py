"""The run configuration: every architectural and training choice is a field
here, loadable from one JSON document with dotted-path overrides.

A config is validated as a whole before anything runs; invalid combinations
(anchor-free with an anchor file, both mixing augmentations enabled, ...) are
rejected with the offending field path.  Enabling horizontal flip or random
crop is legal but produces a warning, since both damage referring semantics.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

from .augment import AugmentPolicy, TransformSpec

RESOLUTION_GRID = (256, 320, 416, 512, 608)
TEXT_VARIANTS = ("lstm", "lstm_glove", "lstm_glove_sa")
BACKBONE_KINDS = ("reference_small", "external")
SCHEDULE_KINDS = ("step", "cosine")
PARADIGMS = ("anchor_based", "anchor_free")
CONF_LOSSES = ("bce", "bce_label_smooth", "focal")
BOX_LOSSES = ("mse_raw", "smooth_l1_raw", "iou", "giou")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class DataSection:
    train_manifest: str | None = None
    val_manifest: str | None = None
    image_root: str | None = None
    max_expression_len: int = 15
    glove_path: str | None = None
    batch_size: int = 32


@dataclass
class AugmentSection:
    random_resize: bool = False
    random_resize_range: tuple = (0.6, 1.4)
    random_resize_snap: int = 32
    elastic: bool = False
    elastic_alpha: float = 24.0
    elastic_sigma: float = 8.0
    rand_augment: bool = False
    rand_augment_ops: int = 2
    rand_augment_magnitude: int = 9
    random_erasing: bool = False
    erasing_area: tuple = (0.02, 0.2)
    mixup: bool = False
    mixup_beta: float = 1.5
    cutmix: bool = False
    cutmix_area: tuple = (0.1, 0.3)
    horizontal_flip: bool = False
    random_crop: bool = False
    crop_scale: tuple = (0.6, 1.0)


@dataclass
class TextencSection:
    variant: str = "lstm_glove"
    sa_layers: int = 0
    hidden_dim: int = 512
    heads: int = 8
    dropout: float = 0.1
    freeze_embeddings: bool = True
    embed_dim: int = 300
    external_encoder: str | None = None  # "module:attr" plug-in hook


@dataclass
class VisencSection:
    kind: str = "reference_small"
    channels: tuple = (32, 64, 256, 512, 1024)
    freeze: bool = True
    weights_path: str | None = None


@dataclass
class FusionSection:
    dim: int = 512
    guided_attention: bool = True


@dataclass
class HeadSection:
    paradigm: str = "anchor_based"
    anchors_per_scale: int = 3
    anchor_file: str | None = None
    literal_power_decode: bool = False
    multi_scale_heads: bool = False
    center_radius: int = 0  # experimental: extra confidence positives


@dataclass
class LossSection:
    confidence: str = "bce"
    box: str = "mse_raw"
    label_smooth_eps: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    mix_dual_target: bool = False


@dataclass
class ScheduleSection:
    base_lr: float = 1e-4
    kind: str = "step"
    step_epochs: tuple = (35, 37, 39)
    decay_factor: float = 0.1
    total_epochs: int = 40
    warmup_steps: int = 0
    min_lr_ratio: float = 0.01
    grad_clip_norm: float = 5.0
    max_steps: int | None = None  # optional hard stop for desk-scale runs
    checkpoint_every_epochs: int = 1  # 0 = only at the end of the run


@dataclass
class EmaSection:
    enabled: bool = False
    decay: float = 0.9998


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    textenc: TextencSection = field(default_factory=TextencSection)
    visenc: VisencSection = field(default_factory=VisencSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    head: HeadSection = field(default_factory=HeadSection)
    loss: LossSection = field(default_factory=LossSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    ema: EmaSection = field(default_factory=EmaSection)
    seed: int = 0
    resolution: int = 416
    scales_used: int = 1


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def _fill(section_cls, values: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return section_cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path or section_cls.__name__, str(exc)) from exc


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("", "config must be a JSON object")
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in d.items():
        if key not in sections:
            raise ConfigError(key, "unknown section or field")
        factory = sections[key].default_factory if sections[key].default_factory is not dataclasses.MISSING else None
        if factory is not None and dataclasses.is_dataclass(factory()):
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            kwargs[key] = _fill(type(factory()), value, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return from_dict(json.load(fh))


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply "section.field=value" strings; values parse as JSON first."""
    d = to_dict(cfg)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(item, "override must look like path.to.field=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = path.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(path, "no such config field")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(path, "no such config field")
        node[parts[-1]] = value
    return from_dict(d)


def get_path(cfg: RunConfig, path: str):
    node = to_dict(cfg)
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(path, "no such config field")
        node = node[part]
    return node


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def trajectory_hash(cfg: RunConfig) -> str:
    """Hash of everything that shapes the per-step trajectory.  Run-length
    limiters (max_steps, checkpoint cadence) are excluded so a stopped run
    can resume under a longer budget."""
    d = to_dict(cfg)
    d["schedule"].pop("max_steps", None)
    d["schedule"].pop("checkpoint_every_epochs", None)
    blob = json.dumps(d, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(cfg: RunConfig) -> list[str]:
    """Raise ConfigError on the first invalid field; return warnings."""
    warnings: list[str] = []

    if cfg.resolution % 32 != 0 or cfg.resolution < 64:
        raise ConfigError("resolution", f"{cfg.resolution} must be a multiple of 32 and >= 64")
    if not 1 <= cfg.scales_used <= 4:
        raise ConfigError("scales_used", f"{cfg.scales_used} must be in 1..4")

    t = cfg.textenc
    if t.variant not in TEXT_VARIANTS:
        raise ConfigError("textenc.variant", f"{t.variant!r} not in {TEXT_VARIANTS}")
    if not 0 <= t.sa_layers <= 3:
        raise ConfigError("textenc.sa_layers", "must be in 0..3")
    if (t.variant == "lstm_glove_sa") != (t.sa_layers > 0):
        raise ConfigError("textenc.sa_layers",
                          "must be > 0 exactly for the self-attention variant")
    if t.hidden_dim <= 0 or t.hidden_dim % 2:
        raise ConfigError("textenc.hidden_dim", "must be positive and even")
    if t.hidden_dim % t.heads:
        raise ConfigError("textenc.heads", "must divide hidden_dim")
    if t.external_encoder is not None and ":" not in t.external_encoder:
        raise ConfigError("textenc.external_encoder",
                          'must be an importable "module:attr" path')

    v = cfg.visenc
    if v.kind not in BACKBONE_KINDS:
        raise ConfigError("visenc.kind", f"{v.kind!r} not in {BACKBONE_KINDS}")
    if len(v.channels) != 5 or any(c <= 0 for c in v.channels):
        raise ConfigError("visenc.channels", "need 5 positive stage widths")

    if cfg.fusion.dim <= 0:
        raise ConfigError("fusion.dim", "must be positive")

    h = cfg.head
    if h.paradigm not in PARADIGMS:
        raise ConfigError("head.paradigm", f"{h.paradigm!r} not in {PARADIGMS}")
    if h.paradigm == "anchor_free" and h.anchor_file is not None:
        raise ConfigError("head.anchor_file", "anchor-free head cannot take an anchor file")
    if h.paradigm == "anchor_based" and h.anchors_per_scale < 1:
        raise ConfigError("head.anchors_per_scale", "must be >= 1")
    if h.center_radius < 0:
        raise ConfigError("head.center_radius", "must be >= 0")

    lo = cfg.loss
    if lo.confidence not in CONF_LOSSES:
        raise ConfigError("loss.confidence", f"{lo.confidence!r} not in {CONF_LOSSES}")
    if lo.box not in BOX_LOSSES:
        raise ConfigError("loss.box", f"{lo.box!r} not in {BOX_LOSSES}")
    if not 0.0 < lo.label_smooth_eps < 1.0:
        raise ConfigError("loss.label_smooth_eps", "must be in (0, 1)")

    s = cfg.schedule
    if s.kind not in SCHEDULE_KINDS:
        raise ConfigError("schedule.kind", f"{s.kind!r} not in {SCHEDULE_KINDS}")
    if s.base_lr <= 0:
        raise ConfigError("schedule.base_lr", "must be positive")
    if s.total_epochs < 1:
        raise ConfigError("schedule.total_epochs", "must be >= 1")
    steps = tuple(s.step_epochs)
    if s.kind == "step":
        if list(steps) != sorted(set(steps)):
            raise ConfigError("schedule.step_epochs", "must be strictly increasing")
        if steps and steps[-1] >= s.total_epochs:
            raise ConfigError("schedule.step_epochs",
                              f"milestones must be < total_epochs={s.total_epochs}")

    if not 0.0 <= cfg.ema.decay < 1.0:
        raise ConfigError("ema.decay", "must be in [0, 1)")

    a = cfg.augment
    if a.mixup and a.cutmix:
        raise ConfigError("augment.mixup", "at most one of mixup/cutmix may be enabled")
    if a.horizontal_flip:
        warnings.append(
            "augment.horizontal_flip: enabled, but mirroring inverts left/right "
            "language; disabled in all presets"
        )
    if a.random_crop:
        warnings.append(
            "augment.random_crop: enabled, but cropping can truncate the referent "
            "or its context; disabled in all presets"
        )

    if cfg.data.batch_size < 1:
        raise ConfigError("data.batch_size", "must be >= 1")
    if cfg.data.max_expression_len < 1:
        raise ConfigError("data.max_expression_len", "must be >= 1")

    return warnings


def build_policy(a: AugmentSection) -> AugmentPolicy:
    """Translate the augment section into an ordered transform policy."""
    specs = []
    if a.random_resize:
        specs.append(TransformSpec("random_resize", params={
            "scale_range": tuple(a.random_resize_range), "snap": a.random_resize_snap}))
    if a.random_crop:
        specs.append(TransformSpec("random_crop", params={"scale_range": tuple(a.crop_scale)}))
    if a.horizontal_flip:
        specs.append(TransformSpec("horizontal_flip", prob=0.5))
    if a.elastic:
        specs.append(TransformSpec("elastic_transform", params={
            "alpha": a.elastic_alpha, "sigma": a.elastic_sigma}))
    if a.rand_augment:
        specs.append(TransformSpec("rand_augment", params={
            "n_ops": a.rand_augment_ops, "magnitude": a.rand_augment_magnitude}))
    if a.random_erasing:
        specs.append(TransformSpec("random_erasing", params={
            "area_range": tuple(a.erasing_area)}))
    if a.mixup:
        specs.append(TransformSpec("mixup", prob=0.5, params={"beta_param": a.mixup_beta}))
    if a.cutmix:
        specs.append(TransformSpec("cutmix", prob=0.5, params={"area_range": tuple(a.cutmix_area)}))
    return AugmentPolicy(tuple(specs))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def preset_names() -> list[str]:
    pkg = resources.files(__package__) / "presets"
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> RunConfig:
    pkg = resources.files(__package__) / "presets" / f"{name}.json"
    if not pkg.is_file():
        raise ConfigError(name, f"unknown preset; available: {preset_names()}")
    return from_dict(json.loads(pkg.read_text(encoding="utf-8")))
