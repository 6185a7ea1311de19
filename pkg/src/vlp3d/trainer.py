"""Deterministic training loop for the combined contrastive / generative / masked objectives."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from . import __version__
from .config import TrainConfig
from .encoders import (
    PoolingSpec,
    TextEncoder,
    TextEncoderConfig,
    VisionEncoder,
    VisionEncoderConfig,
    batch_token_sequences,
    patchify_batch,
)
from .errors import ArgumentError, CheckpointMismatchError, StateError, TrainingDivergenceError
from .objectives import (
    TEMPERATURE_RANGE,
    LossBundle,
    MAEDecoder,
    MaskSpec,
    ReportDecoder,
    build_causal_decoder_input,
    build_parallel_decoder_input,
    clip_sigmoid_loss,
    clip_softmax_loss,
    collate_decoder_inputs,
    combine_losses,
    mae_loss,
    parallel_input_length,
    reconstruction_target,
    rrg_loss,
    sample_mask,
)
from .reportgen import SECTIONS, Vocab, render_report, section_token_ids, tokenize
from .volstore import augment, crop, token_grid

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vlp3d-ckpt-1"
LOG_SCHEMA = 1


# --- schedule and plan ------------------------------------------------------------


def peak_lr(cfg: TrainConfig) -> float:
    return cfg.base_lr * (cfg.batch_size / 8) if cfg.lr_batch_scaling else cfg.base_lr


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0, then polynomial decay towards 0 at ``total_steps``."""
    if not 0 <= step < cfg.total_steps:
        raise ArgumentError(f"step {step} outside [0, {cfg.total_steps})")
    peak = peak_lr(cfg)
    if step < cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return peak * (1.0 - frac) ** cfg.poly_exponent


@dataclass(frozen=True)
class BatchPlanEntry:
    step_index: int
    objective: str  # "vl" | "vision_only"
    caption_mode: str  # "causal" | "parallel" | "none"
    spacing_mm: float
    dataset_tag: str  # "paired" | "unpaired"


def mae_start_step(cfg: TrainConfig) -> int:
    """First step at which vision-only batches may appear."""
    if cfg.mae_included_last_fraction <= 0:
        return cfg.total_steps
    return int(math.ceil((1.0 - cfg.mae_included_last_fraction) * cfg.total_steps - 1e-9))


def make_batch_plan(cfg: TrainConfig) -> list[BatchPlanEntry]:
    """Per-step objective schedule.

    Before the inclusion point every step is vision-language. From it on,
    steps alternate vision-only / vision-language, starting with vision-only.
    Caption modes are Bernoulli(cappa_p_causal) draws, one per step.
    """
    rng = np.random.default_rng([cfg.seed, 101])
    causal_draws = rng.random(cfg.total_steps) < cfg.cappa_p_causal
    unpaired_draws = rng.random(cfg.total_steps) < cfg.unpaired_fraction
    start = mae_start_step(cfg)
    plan = []
    for s in range(cfg.total_steps):
        if s >= start and (s - start) % 2 == 0:
            tag = "unpaired" if unpaired_draws[s] else "paired"
            plan.append(BatchPlanEntry(s, "vision_only", "none", cfg.mae_spacing_mm, tag))
        else:
            mode = "none" if cfg.lambda_rrg == 0 else ("causal" if causal_draws[s] else "parallel")
            plan.append(BatchPlanEntry(s, "vl", mode, cfg.train_spacing_mm, "paired"))
    return plan


# --- model ------------------------------------------------------------------------


def vision_config(cfg: TrainConfig) -> VisionEncoderConfig:
    return VisionEncoderConfig(
        patch_size=cfg.patch_size,
        embed_dim=cfg.vision_dim,
        depth=cfg.vision_depth,
        heads=cfg.vision_heads,
        use_ape=cfg.use_ape,
        input_size=tuple(cfg.input_size),
        pool=PoolingSpec.make(cfg.vision_pool, cfg.vision_pool_heads, cfg.pool_query_count),
        proj_dim=cfg.joint_dim,
    )


def text_config(cfg: TrainConfig, vocab_size: int) -> TextEncoderConfig:
    return TextEncoderConfig(
        vocab_size=vocab_size,
        embed_dim=cfg.text_dim,
        depth=cfg.text_depth,
        heads=cfg.text_heads,
        max_len=cfg.text_max_len,
        pool=PoolingSpec.make(cfg.text_pool, cfg.text_pool_heads, cfg.pool_query_count),
        proj_dim=cfg.joint_dim,
    )


def causal_max_len(cfg: TrainConfig) -> int:
    return max(cfg.text_max_len + len(SECTIONS), parallel_input_length(cfg.mask_tokens_per_section))


class VLPModel(nn.Module):
    """All trainable parts: both towers, temperature, and the optional decoders."""

    def __init__(self, cfg: TrainConfig, vocab_size: int):
        super().__init__()
        self.vision = VisionEncoder(vision_config(cfg))
        self.text = TextEncoder(text_config(cfg, vocab_size))
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(cfg.temperature_init)), requires_grad=cfg.learnable_temperature
        )
        self.sigmoid_bias = nn.Parameter(torch.tensor(float(cfg.sigmoid_bias_init)))
        self.rrg = None
        if cfg.lambda_rrg > 0:
            self.rrg = ReportDecoder(
                vocab_size, cfg.rrg_dim, cfg.rrg_depth, cfg.rrg_heads, cfg.vision_dim, causal_max_len(cfg)
            )
        self.mae = None
        if cfg.mae_included_last_fraction > 0:
            self.mae = MAEDecoder(
                cfg.vision_dim, cfg.mae_decoder_dim, cfg.mae_decoder_depth, cfg.mae_decoder_heads, cfg.patch_size
            )

    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp().clamp(*TEMPERATURE_RANGE)


def build_model(cfg: TrainConfig, vocab_size: int) -> VLPModel:
    torch.manual_seed(cfg.seed)
    return VLPModel(cfg, vocab_size)


# --- batches ----------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor
    case_ids: list[str]
    text_ids: Optional[torch.Tensor] = None
    text_mask: Optional[torch.Tensor] = None
    decoder: Optional[tuple] = None


def _pick(n_pool: int, k: int, rng) -> np.ndarray:
    if k <= n_pool:
        return rng.choice(n_pool, size=k, replace=False)
    return rng.choice(n_pool, size=k, replace=True)


def make_batch(dataset, cfg: TrainConfig, vocab: Vocab, entry: BatchPlanEntry) -> Batch:
    """Assemble the batch for one plan entry; depends only on (seed, step)."""
    s = entry.step_index
    pool = dataset.split("unpaired" if entry.dataset_tag == "unpaired" else "train")
    if not pool:
        raise ArgumentError(f"dataset has no {entry.dataset_tag} cases")
    idx = _pick(len(pool), cfg.batch_size, np.random.default_rng([cfg.seed, s, 1]))
    cases = [pool[i] for i in idx]
    images = []
    for j, c in enumerate(cases):
        seed = [cfg.seed, s, 2, j]
        v = crop(dataset.volume(c, entry.spacing_mm), cfg.input_size, "random", seed=np.random.default_rng(seed).integers(2**31))
        images.append(augment(v.data, cfg.augmentation_spatial, cfg.augmentation_intensity, seed + [1]))
    batch = Batch(torch.from_numpy(np.stack(images)), [c.case_id for c in cases])
    if entry.objective == "vision_only":
        return batch
    texts = [
        render_report(c.report, shuffle=cfg.sentence_shuffle, p_short=cfg.p_short, seed=[cfg.seed, s, 3, j],
                      short_negatives=cfg.short_negatives)
        for j, c in enumerate(cases)
    ]
    batch.text_ids, batch.text_mask = batch_token_sequences([tokenize(t, vocab, cfg.text_max_len) for t in texts])
    if entry.caption_mode != "none":
        items = []
        for j, c in enumerate(cases):
            sections = section_token_ids(c.report, vocab)
            seed = [cfg.seed, s, 4, j]
            if entry.caption_mode == "parallel":
                items.append(build_parallel_decoder_input(sections, cfg.mask_tokens_per_section, seed,
                                                          cfg.shuffle_sections))
            else:
                items.append(build_causal_decoder_input(sections, seed, cfg.shuffle_sections,
                                                        max_len=causal_max_len(cfg)))
        batch.decoder = collate_decoder_inputs(items)
    return batch


def mask_batch(cfg: TrainConfig, step: int, batch_size: int) -> torch.Tensor:
    grid = token_grid(cfg.input_size, cfg.patch_size)
    masks = [
        sample_mask(MaskSpec(cfg.mask_ratio, cfg.mask_style, seed=np.random.default_rng([cfg.seed, step, 5, j]).integers(2**31),
                             token_grid_shape=grid))
        for j in range(batch_size)
    ]
    return torch.from_numpy(np.stack(masks))


# --- state and step ---------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    model: VLPModel
    optimizer: torch.optim.Optimizer
    step: int = 0


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=0.0, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                             foreach=False)


def init_state(cfg: TrainConfig, vocab_size: int) -> TrainState:
    model = build_model(cfg, vocab_size)
    return TrainState(cfg, model, make_optimizer(model, cfg), 0)


def compute_losses(model: VLPModel, cfg: TrainConfig, batch: Batch, entry: BatchPlanEntry) -> LossBundle:
    if entry.objective == "vision_only":
        if model.mae is None:
            raise StateError("plan schedules a vision-only step but the model has no reconstruction decoder")
        mask = mask_batch(cfg, entry.step_index, batch.images.shape[0])
        target = None
        if cfg.mae_target != "raw":
            patches = patchify_batch(batch.images, cfg.patch_size)
            target = reconstruction_target(patches, cfg.mae_target)
        mae = mae_loss(batch.images, mask, model.vision, model.mae, target)
        return combine_losses({"mae": mae}, cfg.lambda_rrg, cfg.lambda_mae, "vision_only")
    img = model.vision(batch.images)
    txt = model.text(batch.text_ids, batch.text_mask)
    t = model.temperature()
    if cfg.clip_loss == "softmax":
        clip = clip_softmax_loss(img.pooled, txt.pooled, t)
    else:
        clip = clip_sigmoid_loss(img.pooled, txt.pooled, t, model.sigmoid_bias)
    parts = {"clip": clip}
    if entry.caption_mode != "none":
        parts["rrg"] = rrg_loss(img.dense_tokens, batch.decoder, model.rrg)
    return combine_losses(parts, cfg.lambda_rrg, cfg.lambda_mae, "vl")


def train_step(state: TrainState, batch: Batch, entry: BatchPlanEntry) -> tuple[TrainState, LossBundle]:
    """One AdamW update at ``lr_at(step)`` (scaled by ``mae_lr_factor`` on vision-only steps)."""
    cfg = state.cfg
    if state.step != entry.step_index:
        raise StateError(f"state is at step {state.step} but the plan entry is for step {entry.step_index}")
    lr = lr_at(state.step, cfg)
    if entry.objective == "vision_only":
        lr *= cfg.mae_lr_factor
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    bundle = compute_losses(state.model, cfg, batch, entry)
    if not bool(torch.isfinite(bundle.total)):
        raise TrainingDivergenceError(
            f"non-finite loss at step {state.step}",
            {"step": state.step, "lr": lr, "branch": bundle.branch, "losses": bundle.as_floats(),
             "temperature": float(state.model.temperature().detach())},
        )
    state.optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip, foreach=False)
    state.optimizer.step()
    state.step += 1
    return state, bundle


# --- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, vocab_size: int) -> None:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "code_version": __version__,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.digest(),
        "step": state.step,
        "seed": state.cfg.seed,
        "vocab_size": vocab_size,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save({"manifest": manifest, "model": state.model.state_dict(),
                "optimizer": state.optimizer.state_dict()}, tmp)
    tmp.replace(path)


def load_checkpoint(path, expect_config: Optional[TrainConfig] = None) -> TrainState:
    """Restore a training state; refuses a manifest that does not match ``expect_config``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    manifest = blob.get("manifest", {})
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    cfg = TrainConfig.from_dict(manifest["config"])
    if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expect_config.to_dict().items() if manifest["config"].get(k) != v)
        raise CheckpointMismatchError(f"{path}: checkpoint config differs in {diff}")
    state = init_state(cfg, manifest["vocab_size"])
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.step = int(manifest["step"])
    return state


# --- loop -------------------------------------------------------------------------


def train(
    cfg: TrainConfig,
    dataset,
    out_dir=None,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
    callback: Optional[Callable[[TrainState, LossBundle, BatchPlanEntry], None]] = None,
) -> tuple[TrainState, list[dict]]:
    """Run the batch plan from ``state.step`` (fresh state if None) up to ``stop_at``.

    When ``out_dir`` is given, per-step records are appended to
    ``log.jsonl`` and checkpoints are written there.
    """
    torch.use_deterministic_algorithms(True)
    vocab = dataset.vocab
    if state is None:
        state = init_state(cfg, len(vocab))
    plan = make_batch_plan(cfg)
    stop = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "a" if state.step > 0 else "w", encoding="utf-8")
    history = []
    try:
        while state.step < stop:
            entry = plan[state.step]
            batch = make_batch(dataset, cfg, vocab, entry)
            lr = lr_at(entry.step_index, cfg) * (cfg.mae_lr_factor if entry.objective == "vision_only" else 1.0)
            state, bundle = train_step(state, batch, entry)
            record = {"v": LOG_SCHEMA, "step": entry.step_index, "branch": entry.objective,
                      "caption_mode": entry.caption_mode, "lr": lr, "losses": bundle.as_floats(),
                      "temperature": float(state.model.temperature().detach())}
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(state, bundle, entry)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step{state.step:06d}.pt", state, len(vocab))
            if entry.step_index % 100 == 0:
                log.info("step %d %s %s", entry.step_index, entry.objective, record["losses"])
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None and state.step == cfg.total_steps:
        save_checkpoint(out / "final.pt", state, len(vocab))
    return state, history


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
