"""Training objectives: contrastive alignment, report generation and masked reconstruction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import Block, Rotary3D, VisionEncoder, causal_bias, grid_coords, patchify_batch
from .errors import ArgumentError, StateError
from .reportgen import BOS, EOS, HEADER_IDS, MASK, PAD, SECTIONS

TEMPERATURE_INIT = 0.07
TEMPERATURE_RANGE = (0.005, 1.0)
UNIT_NORM_TOL = 1e-5


# --- contrastive ---------------------------------------------------------------


def _check_unit_rows(*mats):
    for m in mats:
        if m.dim() != 2 or m.shape[0] < 1:
            raise ArgumentError(f"expected a non-empty (B, D) matrix, got {tuple(m.shape)}")
        norms = m.detach().norm(dim=1)
        if bool(((norms - 1).abs() > UNIT_NORM_TOL).any()):
            raise ArgumentError("contrastive inputs must have unit-norm rows")
    if mats[0].shape != mats[1].shape:
        raise ArgumentError("image and text matrices must have equal shapes")


def pairwise_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(B, B) dot products computed elementwise so that sim(a, b) == sim(b, a).T bit-for-bit."""
    return (a[:, None, :] * b[None, :, :]).sum(dim=-1)


def _sorted_sum(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # summing in sorted order makes the reduction independent of input order;
    # contiguous memory keeps the reduction order independent of strides
    return torch.sort(x, dim=dim).values.contiguous().sum(dim=dim)


def _sorted_logsumexp(x: torch.Tensor) -> torch.Tensor:
    s = torch.sort(x.contiguous(), dim=-1).values.contiguous()
    m = s[..., -1:].detach()
    return m[..., 0] + torch.log(torch.exp(s - m).sum(dim=-1))


def clip_softmax_loss(image: torch.Tensor, text: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over a batch of matched unit-norm pairs.

    All reductions run over sorted values, so the loss is exactly invariant to
    a simultaneous permutation of the pairs and to swapping the two towers.
    """
    _check_unit_rows(image, text)
    logits = pairwise_similarity(image, text) / temperature
    diag = torch.diagonal(logits)
    rows = _sorted_logsumexp(logits) - diag
    cols = _sorted_logsumexp(logits.T) - diag
    n = image.shape[0]
    return (_sorted_sum(rows) / n + _sorted_sum(cols) / n) / 2


def clip_sigmoid_loss(image: torch.Tensor, text: torch.Tensor, temperature, bias) -> torch.Tensor:
    """Mean pairwise binary loss: matched pairs labelled +1, all others -1."""
    _check_unit_rows(image, text)
    n = image.shape[0]
    z = pairwise_similarity(image, text) / temperature + bias
    sign = 2 * torch.eye(n, dtype=z.dtype, device=z.device) - 1
    per_pair = -F.logsigmoid(sign * z)
    return _sorted_sum(per_pair.flatten()) / (n * n)


# --- report generation ----------------------------------------------------------


@dataclass
class DecoderInput:
    """One decoding instance.

    ``ids[t]`` is fed at position t and ``targets[t]`` is predicted there;
    loss is taken only where ``loss_mask`` is True.
    """

    ids: list[int]
    targets: list[int]
    loss_mask: list[bool]
    attention_mode: str
    section_order: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.ids) == len(self.targets) == len(self.loss_mask)):
            raise ArgumentError("ids, targets and loss_mask must have equal length")
        if self.attention_mode not in ("causal", "bidirectional"):
            raise ArgumentError(f"unknown attention mode {self.attention_mode!r}")


def _section_order(seed, shuffle: bool) -> tuple[int, ...]:
    if not shuffle:
        return tuple(range(len(SECTIONS)))
    return tuple(int(i) for i in np.random.default_rng(seed).permutation(len(SECTIONS)))


def build_parallel_decoder_input(
    section_tokens: Sequence[Sequence[int]], mask_tokens_per_section: int, seed, shuffle_sections: bool = True
) -> DecoderInput:
    """Headers first, then a fixed block of MASK slots per section.

    Layout: [BOS, h_pi(1) .. h_pi(8), MASK x (8 M), EOS]. The k-th block of M
    slots predicts the first M tokens of section pi(k), PAD-filled; PAD
    targets carry no loss. The length never depends on report content.
    """
    m = int(mask_tokens_per_section)
    if m < 1:
        raise ArgumentError("need at least one mask token per section")
    if len(section_tokens) != len(SECTIONS):
        raise ArgumentError(f"expected {len(SECTIONS)} sections, got {len(section_tokens)}")
    order = _section_order(seed, shuffle_sections)
    n_sec = len(SECTIONS)
    ids = [BOS] + [HEADER_IDS[k] for k in order] + [MASK] * (n_sec * m) + [EOS]
    targets = [PAD] * (1 + n_sec)
    for k in order:
        toks = list(section_tokens[k])[:m]
        targets += toks + [PAD] * (m - len(toks))
    targets.append(PAD)
    loss_mask = [t != PAD for t in targets]
    return DecoderInput(ids, targets, loss_mask, "bidirectional", order)


def parallel_input_length(mask_tokens_per_section: int) -> int:
    return 2 + len(SECTIONS) * (1 + mask_tokens_per_section)


def build_causal_decoder_input(
    section_tokens: Sequence[Sequence[int]], seed, shuffle_sections: bool = True, max_len: Optional[int] = None
) -> DecoderInput:
    """Teacher-forced next-token layout with section headers interleaved.

    The sequence [BOS, h_pi(1), s_pi(1).., h_pi(2), .., EOS] is shifted by one;
    loss is taken on every target that is not a special token (headers
    included), so headers guide the decoder but are never predicted.
    """
    order = _section_order(seed, shuffle_sections)
    seq = [BOS]
    for k in order:
        seq.append(HEADER_IDS[k])
        seq += list(section_tokens[k])
    seq.append(EOS)
    if max_len is not None and len(seq) - 1 > max_len:
        seq = seq[: max_len + 1]
    ids, targets = seq[:-1], seq[1:]
    special = {PAD, BOS, EOS, MASK, *HEADER_IDS}
    loss_mask = [t not in special for t in targets]
    return DecoderInput(ids, targets, loss_mask, "causal", order)


def collate_decoder_inputs(items: Sequence[DecoderInput]):
    """Stack decoder inputs; trailing padding is excluded from the loss."""
    modes = {d.attention_mode for d in items}
    if len(modes) != 1:
        raise ArgumentError("cannot mix causal and bidirectional inputs in one batch")
    length = max(len(d.ids) for d in items)
    ids = torch.full((len(items), length), PAD, dtype=torch.long)
    targets = torch.full((len(items), length), PAD, dtype=torch.long)
    loss_mask = torch.zeros((len(items), length), dtype=torch.bool)
    for i, d in enumerate(items):
        n = len(d.ids)
        ids[i, :n] = torch.as_tensor(d.ids)
        targets[i, :n] = torch.as_tensor(d.targets)
        loss_mask[i, :n] = torch.as_tensor(d.loss_mask)
    return ids, targets, loss_mask, modes.pop()


class ReportDecoder(nn.Module):
    """Small transformer decoder cross-attending to vision tokens."""

    def __init__(self, vocab_size: int, dim: int, depth: int, heads: int, vision_dim: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.tok_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, context_dim=vision_dim) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size)
        nn.init.normal_(self.tok_embed.weight, std=0.02)

    def forward(self, ids: torch.Tensor, vision_tokens: torch.Tensor, attention_mode: str) -> torch.Tensor:
        """Return (B, L, V) logits."""
        if ids.shape[1] > self.max_len:
            raise ArgumentError(f"decoder input length {ids.shape[1]} exceeds {self.max_len}")
        x = self.tok_embed(ids) + self.pos_embed[: ids.shape[1]]
        bias = causal_bias(ids.shape[1], x.dtype, x.device) if attention_mode == "causal" else None
        for blk in self.blocks:
            x = blk(x, bias=bias, context=vision_tokens)
        return self.head(self.norm(x))


def rrg_loss(vision_tokens: torch.Tensor, batch, decoder: ReportDecoder) -> torch.Tensor:
    """Token cross-entropy averaged over loss-mask positions.

    ``batch`` is a DecoderInput, a list of them, or the tuple returned by
    :func:`collate_decoder_inputs`.
    """
    if isinstance(batch, DecoderInput):
        batch = [batch]
    if isinstance(batch, list):
        batch = collate_decoder_inputs(batch)
    ids, targets, loss_mask, mode = batch
    if not bool(loss_mask.any()):
        raise ArgumentError("decoder input has no loss positions")
    if vision_tokens.dim() == 2:
        vision_tokens = vision_tokens[None]
    logits = decoder(ids, vision_tokens, mode)
    return F.cross_entropy(logits[loss_mask], targets[loss_mask])


# --- masked image modelling ------------------------------------------------------

MASK_STYLES = ("random", "block", "inverse-block")
MAE_TARGETS = ("raw", "patch-normalized")


@dataclass(frozen=True)
class MaskSpec:
    ratio: float = 0.75
    style: str = "random"
    seed: int = 0
    token_grid_shape: tuple[int, int, int] = (4, 4, 4)


def masked_count(ratio: float, total: int) -> int:
    """round(ratio * total), halves rounded up."""
    return int(math.floor(ratio * total + 0.5))


def _box_for_count(grid, count):
    """Smallest-volume sub-box holding ``count`` cells; ties go to the most cubic, then lexicographic."""
    best = None
    for bx in range(1, grid[0] + 1):
        for by in range(1, grid[1] + 1):
            bz = min(grid[2], -(-count // (bx * by)))
            vol = bx * by * bz
            if vol < count:
                continue
            key = (vol, max(bx, by, bz) - min(bx, by, bz), (bx, by, bz))
            if best is None or key < best:
                best = key
    return best[2]


def _block(grid, count, rng) -> np.ndarray:
    """Boolean grid with exactly ``count`` cells in one contiguous sub-box.

    The smallest box holding ``count`` cells is placed at a seeded offset;
    surplus cells are dropped from the end of the box in raster order, which
    keeps the set 6-connected.
    """
    out = np.zeros(grid, dtype=bool)
    if count == 0:
        return out
    box = _box_for_count(grid, count)
    start = [int(rng.integers(0, g - b + 1)) for g, b in zip(grid, box)]
    cells = np.ones(box, dtype=bool).reshape(-1)
    cells[count:] = False
    out[start[0] : start[0] + box[0], start[1] : start[1] + box[1], start[2] : start[2] + box[2]] = cells.reshape(box)
    return out


def sample_mask(spec: MaskSpec) -> np.ndarray:
    """Boolean token grid, True where a token is hidden from the encoder."""
    if not 0.0 <= spec.ratio <= 1.0:
        raise ArgumentError(f"mask ratio must lie in [0, 1], got {spec.ratio}")
    if spec.style not in MASK_STYLES:
        raise ArgumentError(f"unknown mask style {spec.style!r}")
    grid = tuple(int(g) for g in spec.token_grid_shape)
    if len(grid) != 3 or min(grid) < 1:
        raise ArgumentError(f"token grid must be three positive ints, got {grid}")
    total = int(np.prod(grid))
    n_mask = masked_count(spec.ratio, total)
    rng = np.random.default_rng(spec.seed)
    if spec.style == "random":
        flat = np.zeros(total, dtype=bool)
        flat[rng.permutation(total)[:n_mask]] = True
        return flat.reshape(grid)
    if spec.style == "block":
        return _block(grid, n_mask, rng)
    return ~_block(grid, total - n_mask, rng)


class MAEDecoder(nn.Module):
    """Lightweight decoder predicting voxel patches for every grid position."""

    def __init__(self, encoder_dim: int, dim: int, depth: int, heads: int, patch_size: int, rope_base: float = 100.0):
        super().__init__()
        self.embed = nn.Linear(encoder_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        rotary = Rotary3D(dim // heads, rope_base)
        self.blocks = nn.ModuleList(Block(dim, heads, rotary=rotary) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, patch_size**3)

    def forward(self, visible: torch.Tensor, visible_index: torch.Tensor, grid) -> torch.Tensor:
        """visible: (B, n_vis, D_enc) at flat positions ``visible_index`` (B, n_vis)."""
        b = visible.shape[0]
        n = int(np.prod(grid))
        x = self.mask_token.expand(b, n, -1).clone()
        x.scatter_(1, visible_index[..., None].expand(-1, -1, x.shape[-1]), self.embed(visible))
        coords = grid_coords(grid, x.device)
        for blk in self.blocks:
            x = blk(x, coords=coords)
        return self.head(self.norm(x))


def masked_patch_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the voxels of masked patches only."""
    return ((pred[mask] - target[mask]) ** 2).mean()


def reconstruction_target(patches: torch.Tensor, kind: str = "raw") -> torch.Tensor:
    """Raw voxel patches, or each patch standardized to zero mean and unit variance."""
    if kind == "raw":
        return patches
    if kind == "patch-normalized":
        mean = patches.mean(dim=-1, keepdim=True)
        var = patches.var(dim=-1, keepdim=True, unbiased=False)
        return (patches - mean) / torch.sqrt(var + 1e-6)
    raise ArgumentError(f"unknown reconstruction target {kind!r}")


def mae_loss(
    volumes: torch.Tensor, mask: torch.Tensor, encoder: VisionEncoder, decoder: MAEDecoder, target=None
) -> torch.Tensor:
    """Encode visible patches only, reconstruct the masked ones.

    Args:
        volumes: (B, X, Y, Z) normalized crops.
        mask: (B, gx, gy, gz) or (gx, gy, gz) boolean grid, True = hidden.
            Every sample must hide the same number of tokens.
        target: optional (B, N, p^3) reconstruction target; defaults to the
            raw normalized voxel patches.
    """
    grid = encoder.check_shape(volumes.shape[1:])
    b = volumes.shape[0]
    if mask.dim() == 3:
        mask = mask[None].expand(b, -1, -1, -1)
    if tuple(mask.shape[1:]) != grid:
        raise ArgumentError(f"mask grid {tuple(mask.shape[1:])} does not match token grid {grid}")
    flat = mask.reshape(b, -1)
    counts = flat.sum(dim=1)
    if bool((counts == 0).any()):
        raise ArgumentError("mask hides no tokens; nothing to reconstruct")
    if bool((counts != counts[0]).any()):
        raise ArgumentError("every sample must hide the same number of tokens")
    if bool((counts == flat.shape[1]).any()):
        raise ArgumentError("mask hides every token; the encoder would see nothing")
    patches = patchify_batch(volumes, encoder.cfg.patch_size)
    if target is None:
        target = patches
    # stable sort keeps visible tokens in raster order
    visible_index = torch.sort(flat.to(torch.int8), dim=1, stable=True).indices[:, : flat.shape[1] - int(counts[0])]
    coords = grid_coords(grid, volumes.device)[visible_index]
    vis_patches = torch.gather(patches, 1, visible_index[..., None].expand(-1, -1, patches.shape[-1]))
    encoded = encoder.forward_tokens(vis_patches, coords, token_index=visible_index)
    pred = decoder(encoded, visible_index, grid)
    return masked_patch_mse(pred, target, flat)


# --- combination -------------------------------------------------------------------


@dataclass
class LossBundle:
    branch: str
    total: torch.Tensor
    clip_loss: Optional[torch.Tensor] = None
    rrg_loss: Optional[torch.Tensor] = None
    mae_loss: Optional[torch.Tensor] = None
    lambda_rrg: float = 0.0
    lambda_mae: float = 0.0

    def as_floats(self) -> dict:
        out = {"total": float(self.total.detach())}
        for name in ("clip_loss", "rrg_loss", "mae_loss"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(value.detach())
        return out

    def recompute_total(self):
        if self.branch == "vision_only":
            return self.lambda_mae * self.mae_loss
        total = self.clip_loss
        if self.rrg_loss is not None:
            total = total + self.lambda_rrg * self.rrg_loss
        return total


def combine_losses(parts: dict, lambda_rrg: float, lambda_mae: float, schedule_state: str) -> LossBundle:
    """Weight the scheduled parts into a total.

    vision-language step: clip + lambda_rrg * rrg (rrg optional);
    vision-only step: lambda_mae * mae.
    """
    if lambda_rrg < 0 or lambda_mae < 0:
        raise ArgumentError("loss weights must be non-negative")
    present = {k for k, v in parts.items() if v is not None}
    if schedule_state == "vl":
        if "clip" not in present or "mae" in present:
            raise StateError(f"a vision-language step needs clip (and optionally rrg), got {sorted(present)}")
        total = parts["clip"]
        if "rrg" in present:
            total = total + lambda_rrg * parts["rrg"]
        return LossBundle("vl", total, clip_loss=parts["clip"], rrg_loss=parts.get("rrg"),
                          lambda_rrg=lambda_rrg, lambda_mae=lambda_mae)
    if schedule_state == "vision_only":
        if present != {"mae"}:
            raise StateError(f"a vision-only step needs exactly mae, got {sorted(present)}")
        return LossBundle("vision_only", lambda_mae * parts["mae"], mae_loss=parts["mae"],
                          lambda_rrg=lambda_rrg, lambda_mae=lambda_mae)
    raise StateError(f"unknown schedule state {schedule_state!r}")
