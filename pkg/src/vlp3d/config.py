"""Flat experiment configuration, its text format and one-axis sweeps."""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

from .encoders import POOL_SCHEMES
from .errors import ArgumentError, ConfigError
from .objectives import MAE_TARGETS, MASK_STYLES
from .volstore import AUGMENT_LEVELS

SEED_ENV_VAR = "VLP3D_SEED"


def _f(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class TrainConfig:
    # data synthesis
    catalogue_size: int = _f(18, "number of abnormality classes")
    phantom_shape: tuple[int, int, int] = _f((64, 64, 64), "synthetic volume shape in voxels")
    phantom_spacing_mm: float = _f(1.0, "native isotropic spacing of synthetic volumes")
    lesion_count_range: tuple[int, int] = _f((0, 3), "min,max lesions planted per case")
    n_train: int = _f(32, "paired training cases")
    n_val: int = _f(32, "validation cases (probe selection, thresholds)")
    n_test: int = _f(32, "test cases")
    n_unpaired: int = _f(0, "image-only cases usable by vision-only steps")
    # image pipeline
    train_spacing_mm: float = _f(2.0, "isotropic spacing for vision-language batches")
    mae_spacing_mm: float = _f(2.0, "isotropic spacing for vision-only batches")
    input_size: tuple[int, int, int] = _f((32, 32, 32), "encoder crop size in voxels")
    augmentation_spatial: str = _f("low", "spatial augmentation preset: off|low|high")
    augmentation_intensity: str = _f("low", "intensity augmentation preset: off|low|high")
    # text pipeline
    text_max_len: int = _f(160, "text encoder context length incl. BOS/EOS")
    sentence_shuffle: bool = _f(True, "permute report sentences each step")
    p_short: float = _f(0.25, "probability of replacing the report by its short findings")
    short_negatives: bool = _f(True, "short findings include negative statements")
    # vision tower
    patch_size: int = _f(8, "cubic patch edge in voxels")
    vision_dim: int = _f(192, "vision embedding width")
    vision_depth: int = _f(6, "vision transformer blocks")
    vision_heads: int = _f(6, "vision attention heads")
    use_ape: bool = _f(False, "absolute positional table (fixes input size) instead of 3D rotary")
    vision_pool: str = _f("learned-attention", "vision pooling scheme")
    vision_pool_heads: int = _f(12, "vision attention-pooling heads")
    pool_query_count: int = _f(4, "queries of multi-learned-attention pooling")
    # text tower
    text_dim: int = _f(128, "text embedding width")
    joint_dim: int = _f(128, "width of the shared image-text embedding space")
    text_depth: int = _f(4, "text transformer blocks")
    text_heads: int = _f(4, "text attention heads")
    text_pool: str = _f("learned-attention", "text pooling scheme")
    text_pool_heads: int = _f(8, "text attention-pooling heads")
    # contrastive objective
    clip_loss: str = _f("softmax", "contrastive loss: softmax|sigmoid")
    temperature_init: float = _f(0.07, "initial contrastive temperature")
    learnable_temperature: bool = _f(True, "train the temperature (clamped to [0.005, 1])")
    sigmoid_bias_init: float = _f(-5.0, "initial bias of the sigmoid loss")
    # report generation objective
    lambda_rrg: float = _f(0.3, "report generation loss weight (0 disables the decoder)")
    cappa_p_causal: float = _f(0.0, "probability that a step uses causal instead of parallel captioning")
    rrg_depth: int = _f(4, "report decoder blocks")
    rrg_dim: int = _f(128, "report decoder width")
    rrg_heads: int = _f(4, "report decoder heads")
    mask_tokens_per_section: int = _f(16, "parallel captioning mask slots per section")
    shuffle_sections: bool = _f(True, "permute section order in decoder inputs")
    # masked image modelling objective
    lambda_mae: float = _f(1.0, "masked reconstruction loss weight")
    mae_included_last_fraction: float = _f(0.25, "fraction of training (at the end) that alternates in vision-only steps")
    mask_ratio: float = _f(0.75, "fraction of tokens hidden from the encoder")
    mask_style: str = _f("random", "mask style: random|block|inverse-block")
    mae_target: str = _f("raw", "reconstruction target: raw|patch-normalized voxels")
    mae_decoder_depth: int = _f(6, "reconstruction decoder blocks")
    mae_decoder_dim: int = _f(128, "reconstruction decoder width")
    mae_decoder_heads: int = _f(4, "reconstruction decoder heads")
    mae_lr_factor: float = _f(0.5, "learning-rate multiplier on vision-only steps")
    unpaired_fraction: float = _f(0.0, "probability that a vision-only batch draws unpaired cases")
    # optimisation
    total_steps: int = _f(2000, "optimizer steps")
    warmup_steps: int = _f(50, "linear warm-up steps")
    base_lr: float = _f(3e-4, "peak learning rate at batch size 8")
    batch_size: int = _f(8, "cases per step")
    lr_batch_scaling: bool = _f(True, "scale the peak learning rate linearly with batch_size / 8")
    poly_exponent: float = _f(0.9, "exponent of the polynomial decay after warm-up")
    beta1: float = _f(0.9, "AdamW beta1")
    beta2: float = _f(0.95, "AdamW beta2")
    weight_decay: float = _f(0.05, "AdamW decoupled weight decay")
    grad_clip: float = _f(1.0, "global gradient-norm clip (0 disables)")
    checkpoint_every: int = _f(0, "save an intermediate checkpoint every N steps (0 = final only)")
    seed: int = _f(0, "global seed")
    # evaluation
    probe_steps: int = _f(2000, "linear-probe optimizer steps")
    probe_batch_size: int = _f(16, "linear-probe batch size")
    zeroshot_refs: int = _f(50, "reference reports per side for native zero-shot")
    zeroshot_temperature: float = _f(0.07, "temperature dividing zero-shot cosine similarities")

    def __post_init__(self):
        problems = invariant_problems(self)
        if problems:
            key, msg = problems[0]
            raise ArgumentError(f"{key}: {msg}")

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for k, v in d.items():
            if k not in hints:
                raise ArgumentError(f"unknown config key {k!r}")
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def invariant_problems(c) -> list[tuple[str, str]]:
    out = []

    def need(cond, key, msg):
        if not cond:
            out.append((key, msg))

    need(c.catalogue_size >= 1, "catalogue_size", "must be >= 1")
    need(len(c.phantom_shape) == 3 and min(c.phantom_shape) >= 32, "phantom_shape", "three ints >= 32")
    need(c.phantom_spacing_mm > 0, "phantom_spacing_mm", "must be positive")
    need(len(c.lesion_count_range) == 2 and 0 <= c.lesion_count_range[0] <= c.lesion_count_range[1],
         "lesion_count_range", "needs 0 <= min <= max")
    for k in ("n_train", "n_val", "n_test"):
        need(getattr(c, k) >= 1, k, "must be >= 1")
    need(c.n_unpaired >= 0, "n_unpaired", "must be >= 0")
    need(c.unpaired_fraction == 0 or c.n_unpaired >= 1, "unpaired_fraction", "needs n_unpaired >= 1")
    for k in ("train_spacing_mm", "mae_spacing_mm"):
        need(getattr(c, k) > 0, k, "must be positive")
    need(c.patch_size >= 1, "patch_size", "must be >= 1")
    need(len(c.input_size) == 3 and c.patch_size >= 1 and all(n % c.patch_size == 0 for n in c.input_size),
         "input_size", f"three ints divisible by patch_size={c.patch_size}")
    for k in ("augmentation_spatial", "augmentation_intensity"):
        need(getattr(c, k) in AUGMENT_LEVELS, k, f"one of {AUGMENT_LEVELS}")
    need(c.text_max_len >= 2, "text_max_len", "must be >= 2")
    for k in ("p_short", "cappa_p_causal", "mae_included_last_fraction", "mask_ratio", "unpaired_fraction"):
        need(0.0 <= getattr(c, k) <= 1.0, k, "must lie in [0, 1]")
    for k in ("vision_pool", "text_pool"):
        need(getattr(c, k) in POOL_SCHEMES, k, f"one of {POOL_SCHEMES}")
    need(c.vision_dim % c.vision_heads == 0, "vision_heads", "must divide vision_dim")
    need(c.vision_dim % c.vision_pool_heads == 0, "vision_pool_heads", "must divide vision_dim")
    need(c.joint_dim >= 1, "joint_dim", "must be >= 1")
    need(c.text_dim % c.text_heads == 0, "text_heads", "must divide text_dim")
    need(c.text_dim % c.text_pool_heads == 0, "text_pool_heads", "must divide text_dim")
    need(c.rrg_dim % c.rrg_heads == 0, "rrg_heads", "must divide rrg_dim")
    need(c.mae_decoder_dim % c.mae_decoder_heads == 0, "mae_decoder_heads", "must divide mae_decoder_dim")
    need(c.clip_loss in ("softmax", "sigmoid"), "clip_loss", "softmax or sigmoid")
    need(0.005 <= c.temperature_init <= 1.0, "temperature_init", "must lie in [0.005, 1]")
    for k in ("lambda_rrg", "lambda_mae", "weight_decay", "grad_clip", "mae_lr_factor"):
        need(getattr(c, k) >= 0, k, "must be non-negative")
    need(c.mask_tokens_per_section >= 1, "mask_tokens_per_section", "must be >= 1")
    need(c.mask_style in MASK_STYLES, "mask_style", f"one of {MASK_STYLES}")
    need(c.mae_target in MAE_TARGETS, "mae_target", f"one of {MAE_TARGETS}")
    need(c.total_steps >= 1, "total_steps", "must be >= 1")
    need(0 <= c.warmup_steps < c.total_steps, "warmup_steps", "must satisfy 0 <= warmup_steps < total_steps")
    need(c.base_lr > 0, "base_lr", "must be positive")
    need(c.batch_size >= 1, "batch_size", "must be >= 1")
    need(c.poly_exponent > 0, "poly_exponent", "must be positive")
    need(c.seed >= 0, "seed", "must be non-negative")
    need(c.probe_steps >= 1 and c.probe_batch_size >= 1, "probe_steps", "probe steps and batch must be >= 1")
    need(c.zeroshot_refs >= 1, "zeroshot_refs", "must be >= 1")
    need(c.zeroshot_temperature > 0, "zeroshot_temperature", "must be positive")
    return out


# --- text format ------------------------------------------------------------------


def _coerce(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key} expects an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key} expects a number, got {raw!r}") from None
    if typ is str:
        return raw
    if origin is tuple:
        args = typing.get_args(typ)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(parts) == 1 and len(args) == 3:
            parts = parts * 3
        if len(parts) != len(args):
            raise ValueError(f"{key} expects {len(args)} comma-separated values, got {raw!r}")
        return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    raise ValueError(f"{key}: unsupported type {typ}")


def parse_config(path, env=None) -> TrainConfig:
    """Read ``key = value`` lines ('#' starts a comment) into a TrainConfig.

    Unknown keys, duplicates, type errors and invariant violations raise
    :class:`ConfigError` naming the offending line. ``VLP3D_SEED`` in the
    environment overrides ``seed``.
    """
    env = os.environ if env is None else env
    hints = typing.get_type_hints(TrainConfig)
    values, lines = {}, {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            close = difflib.get_close_matches(key, hints.keys(), n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigError(f"unknown key {key!r}{hint}", lineno, path)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, path)
        try:
            values[key] = _coerce(raw, hints[key], key)
        except ValueError as exc:
            raise ConfigError(str(exc), lineno, path) from None
        lines[key] = lineno
    if env.get(SEED_ENV_VAR):
        try:
            values["seed"] = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer", path=path) from None
    merged = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    merged.update(values)
    problems = invariant_problems(SimpleNamespace(**merged))
    if problems:
        key, msg = problems[0]
        raise ConfigError(f"{key}: {msg}", lines.get(key), path)
    return TrainConfig(**values)


def config_reference() -> str:
    """Documentation of every config key with its type and default."""
    hints = typing.get_type_hints(TrainConfig)
    rows = ["# vlp3d config reference (generated)", "# key = default    # type: description", ""]
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        shown = ",".join(str(x) for x in default) if isinstance(default, tuple) else str(default).lower() \
            if isinstance(default, bool) else str(default)
        typ = getattr(hints[f.name], "__name__", str(hints[f.name]))
        rows.append(f"{f.name} = {shown}    # {typ}: {f.metadata.get('help', '')}")
    return "\n".join(rows) + "\n"


def write_config(path, cfg: TrainConfig) -> None:
    rows = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        rows.append(f"{k} = {v}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def star_sweep(base_cfg: TrainConfig, axis: str, values) -> list[TrainConfig]:
    """Copies of ``base_cfg`` differing only in ``axis``."""
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    if axis not in names:
        close = difflib.get_close_matches(axis, names, n=1)
        raise ArgumentError(f"unknown sweep axis {axis!r}" + (f"; did you mean {close[0]!r}?" if close else ""))
    return [dataclasses.replace(base_cfg, **{axis: v}) for v in values]
