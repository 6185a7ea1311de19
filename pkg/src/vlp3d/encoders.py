"""Vision and text transformer towers and the token-pooling family."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ArgumentError
from .reportgen import PAD, TokenSequence
from .volstore import Volume

POOL_SCHEMES = ("avg", "max", "learned-attention", "average-attention", "multi-learned-attention")
ATTENTION_SCHEMES = POOL_SCHEMES[2:]


@dataclass(frozen=True)
class PoolingSpec:
    """Token aggregation scheme.

    ``heads`` is set exactly for the attention schemes and ``query_count``
    exactly for ``multi-learned-attention``; use :meth:`make` to fill them.
    """

    scheme: str = "learned-attention"
    heads: Optional[int] = 12
    query_count: Optional[int] = None

    def __post_init__(self):
        if self.scheme not in POOL_SCHEMES:
            raise ArgumentError(f"unknown pooling scheme {self.scheme!r}")
        needs_heads = self.scheme in ATTENTION_SCHEMES
        if needs_heads != (self.heads is not None):
            raise ArgumentError(f"heads must be {'set' if needs_heads else 'None'} for {self.scheme}")
        needs_queries = self.scheme == "multi-learned-attention"
        if needs_queries != (self.query_count is not None):
            raise ArgumentError(f"query_count must be {'set' if needs_queries else 'None'} for {self.scheme}")
        if self.heads is not None and self.heads < 1:
            raise ArgumentError("heads must be positive")
        if self.query_count is not None and self.query_count < 1:
            raise ArgumentError("query_count must be positive")

    @classmethod
    def make(cls, scheme: str, heads: int = 12, query_count: int = 4) -> "PoolingSpec":
        return cls(
            scheme,
            heads if scheme in ATTENTION_SCHEMES else None,
            query_count if scheme == "multi-learned-attention" else None,
        )


@dataclass(frozen=True)
class VisionEncoderConfig:
    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    heads: int = 6
    use_ape: bool = False
    input_size: tuple[int, int, int] = (32, 32, 32)
    mlp_ratio: float = 4.0
    rope_base: float = 100.0
    pool: PoolingSpec = field(default_factory=lambda: PoolingSpec.make("learned-attention", heads=12))
    proj_dim: Optional[int] = None  # width of the shared image-text space; None keeps embed_dim

    def __post_init__(self):
        if any(n % self.patch_size for n in self.input_size):
            raise ArgumentError(f"input size {self.input_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ArgumentError("heads must divide embed_dim")
        if self.pool.heads is not None and self.embed_dim % self.pool.heads:
            raise ArgumentError("pooling heads must divide embed_dim")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(n // self.patch_size for n in self.input_size)


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    max_len: int = 160
    mlp_ratio: float = 4.0
    pool: PoolingSpec = field(default_factory=lambda: PoolingSpec.make("learned-attention", heads=8))
    proj_dim: Optional[int] = None

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ArgumentError("heads must divide embed_dim")
        if self.max_len < 2:
            raise ArgumentError("max_len must be at least 2")
        if self.pool.heads is not None and self.embed_dim % self.pool.heads:
            raise ArgumentError("pooling heads must divide embed_dim")


@dataclass
class EmbeddingSet:
    dense_tokens: torch.Tensor
    pooled: torch.Tensor


# --- building blocks ----------------------------------------------------------


class Rotary3D(nn.Module):
    """Axis-factorized rotary position encoding for 3D token grids.

    The first ``3 * per_axis`` channels of each head are split into three
    groups; group ``a`` is rotated by angles ``coord[a] * freq``. Remaining
    channels pass through. Attention scores then depend only on coordinate
    differences.
    """

    def __init__(self, head_dim: int, base: float = 100.0):
        super().__init__()
        self.per_axis = (head_dim // 6) * 2
        if self.per_axis == 0:
            raise ArgumentError(f"head_dim {head_dim} too small for 3D rotary encoding")
        inv = base ** (-torch.arange(0, self.per_axis, 2, dtype=torch.float64) / self.per_axis)
        self.register_buffer("inv_freq", inv, persistent=False)

    def forward(self, x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        # x: (B, H, N, hd); coords: (N, 3) or (B, N, 3)
        angles = coords.to(torch.float64)[..., None] * self.inv_freq  # (..., N, 3, per_axis/2)
        cos = torch.cos(angles).to(x.dtype).flatten(-2)
        sin = torch.sin(angles).to(x.dtype).flatten(-2)
        if coords.dim() == 3:
            cos, sin = cos[:, None], sin[:, None]
        n_rot = 3 * self.per_axis
        rot, rest = x[..., :n_rot], x[..., n_rot:]
        x1, x2 = rot[..., 0::2], rot[..., 1::2]
        out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)
        return torch.cat((out, rest), dim=-1)


class Attention(nn.Module):
    """Multi-head attention; self-attention when ``context`` is None."""

    def __init__(self, dim: int, heads: int, context_dim: Optional[int] = None, rotary: Optional[Rotary3D] = None):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(context_dim or dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rotary = rotary

    def forward(self, x, context=None, coords=None, bias=None):
        ctx = x if context is None else context
        q = rearrange(self.q(x), "b n (h d) -> b h n d", h=self.heads)
        k, v = rearrange(self.kv(ctx), "b n (two h d) -> two b h n d", two=2, h=self.heads)
        if self.rotary is not None and coords is not None:
            q, k = self.rotary(q, coords), self.rotary(k, coords)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        out = scores.softmax(dim=-1) @ v
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class Block(nn.Module):
    """Pre-norm transformer block with optional cross-attention."""

    def __init__(self, dim, heads, mlp_ratio=4.0, rotary=None, context_dim=None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, rotary=rotary)
        self.cross = None
        if context_dim is not None:
            self.norm_x = nn.LayerNorm(dim)
            self.cross = Attention(dim, heads, context_dim=context_dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, coords=None, bias=None, context=None):
        x = x + self.attn(self.norm1(x), coords=coords, bias=bias)
        if self.cross is not None:
            x = x + self.cross(self.norm_x(x), context=context)
        return x + self.mlp(self.norm2(x))


def key_padding_bias(mask: torch.Tensor, dtype) -> torch.Tensor:
    """Additive (B, 1, 1, N) bias that removes masked-out keys."""
    bias = torch.zeros(mask.shape, dtype=dtype, device=mask.device)
    return bias.masked_fill(~mask, float("-inf"))[:, None, None, :]


def causal_bias(n: int, dtype, device=None) -> torch.Tensor:
    """Additive (n, n) bias letting position s attend to positions <= s."""
    upper = torch.ones(n, n, dtype=torch.bool, device=device).triu(1)
    return torch.zeros(n, n, dtype=dtype, device=device).masked_fill(upper, float("-inf"))


class Pool(nn.Module):
    """Aggregate (B, N, D) tokens into (B, D) under a :class:`PoolingSpec`.

    Attention schemes use multi-head attention from one or more queries; the
    value and output projections start as identities so a single token pools
    to itself.
    """

    def __init__(self, dim: int, spec: PoolingSpec):
        super().__init__()
        self.spec = spec
        if spec.scheme not in ATTENTION_SCHEMES:
            return
        if dim % spec.heads:
            raise ArgumentError(f"pool heads {spec.heads} must divide {dim}")
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        for lin in (self.v_proj, self.out_proj):
            nn.init.eye_(lin.weight)
            nn.init.zeros_(lin.bias)
        if spec.scheme != "average-attention":
            n_queries = spec.query_count or 1
            self.query = nn.Parameter(torch.randn(n_queries, dim) * 0.02)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        if not bool(mask.any(dim=1).all()):
            raise ArgumentError("cannot pool a fully masked token set")
        scheme = self.spec.scheme
        if scheme == "avg":
            return masked_mean(x, mask)
        if scheme == "max":
            return x.masked_fill(~mask[..., None], float("-inf")).amax(dim=1)
        if scheme == "average-attention":
            query = masked_mean(x, mask)[:, None, :]
        else:
            query = self.query.expand(x.shape[0], -1, -1)
        h = self.spec.heads
        q = rearrange(self.q_proj(query), "b q (h d) -> b h q d", h=h)
        k = rearrange(self.k_proj(x), "b n (h d) -> b h n d", h=h)
        v = rearrange(self.v_proj(x), "b n (h d) -> b h n d", h=h)
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]) + key_padding_bias(mask, x.dtype)
        out = rearrange(scores.softmax(-1) @ v, "b h q d -> b q (h d)")
        return self.out_proj(out).mean(dim=1)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask.to(x.dtype)[..., None]
    return (x * w).sum(dim=1) / w.sum(dim=1)


# --- towers -------------------------------------------------------------------


def grid_coords(grid, device=None) -> torch.Tensor:
    """(N, 3) integer coordinates of a token grid in row-major token order."""
    axes = [torch.arange(g, device=device) for g in grid]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1).reshape(-1, 3)


def patchify_batch(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, X, Y, Z) -> (B, N, p^3) in the same order as :func:`volstore.patchify`."""
    p = patch_size
    return rearrange(x, "b (gx px) (gy py) (gz pz) -> b (gx gy gz) (px py pz)", px=p, py=p, pz=p)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size**3, d)
        self.ape = None
        rotary = None
        if cfg.use_ape:
            n = int(np.prod(cfg.grid))
            self.ape = nn.Parameter(torch.randn(1, n, d) * 0.02)
        else:
            rotary = Rotary3D(d // cfg.heads, cfg.rope_base)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio, rotary=rotary) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.pool = Pool(d, cfg.pool)
        self.proj = nn.Linear(d, cfg.proj_dim, bias=False) if cfg.proj_dim else nn.Identity()

    def check_shape(self, shape) -> tuple[int, int, int]:
        shape = tuple(int(n) for n in shape)
        if self.cfg.use_ape and shape != tuple(self.cfg.input_size):
            raise ArgumentError(f"absolute position table fixes the input to {self.cfg.input_size}, got {shape}")
        if any(n % self.cfg.patch_size for n in shape):
            raise ArgumentError(f"input {shape} not divisible by patch size {self.cfg.patch_size}")
        return tuple(n // self.cfg.patch_size for n in shape)

    def forward_tokens(self, patches, coords, token_index=None) -> torch.Tensor:
        """Run the trunk on a (possibly partial) set of patches.

        Args:
            patches: (B, n, p^3) flattened voxel patches.
            coords: (n, 3) or (B, n, 3) grid coordinates of those patches.
            token_index: (n,) or (B, n) positions in the full grid, needed to
                look up the absolute table when ``use_ape`` is set.
        """
        x = self.patch_embed(patches)
        if self.ape is not None:
            if token_index is None:
                x = x + self.ape
            elif token_index.dim() == 1:
                x = x + self.ape[:, token_index]
            else:
                x = x + self.ape[0][token_index]
        for blk in self.blocks:
            x = blk(x, coords=None if self.ape is not None else coords)
        return self.norm(x)

    def forward(self, x: torch.Tensor) -> EmbeddingSet:
        grid = self.check_shape(x.shape[1:])
        patches = patchify_batch(x, self.cfg.patch_size)
        dense = self.forward_tokens(patches, grid_coords(grid, x.device))
        return EmbeddingSet(dense, F.normalize(self.proj(self.pool(dense)), dim=-1))

    def dense_aligned(self, x: torch.Tensor) -> torch.Tensor:
        """Per-token embeddings in the shared space (value and output path of an attention pool).

        Not used by any evaluation; exposed for dense feature inspection.
        """
        dense = self.forward(x).dense_tokens
        if self.cfg.pool.scheme in ATTENTION_SCHEMES:
            dense = self.pool.out_proj(self.pool.v_proj(dense))
        return F.normalize(self.proj(dense), dim=-1)


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_len, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.pool = Pool(d, cfg.pool)
        self.proj = nn.Linear(d, cfg.proj_dim, bias=False) if cfg.proj_dim else nn.Identity()
        nn.init.normal_(self.tok_embed.weight, std=0.02)

    def forward(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> EmbeddingSet:
        """Encode (B, L) token ids; ``mask`` marks real (non-PAD) positions."""
        if ids.shape[1] > self.cfg.max_len:
            raise ArgumentError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if mask is None:
            mask = ids != PAD
        # trailing all-padding columns carry no information
        keep = int(mask.any(dim=0).nonzero().max()) + 1 if bool(mask.any()) else 1
        ids, mask = ids[:, :keep], mask[:, :keep]
        ids = ids.masked_fill(~mask, PAD)
        x = self.tok_embed(ids) + self.pos_embed[: ids.shape[1]]
        bias = key_padding_bias(mask, x.dtype)
        for blk in self.blocks:
            x = blk(x, bias=bias)
        x = self.norm(x) * mask[..., None].to(x.dtype)
        return EmbeddingSet(x, F.normalize(self.proj(self.pool(x, mask)), dim=-1))


def batch_token_sequences(seqs, pad_to: Optional[int] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token sequences into (ids, mask) tensors."""
    seqs = [s.ids if isinstance(s, TokenSequence) else list(s) for s in seqs]
    length = pad_to or max(len(s) for s in seqs)
    ids = torch.full((len(seqs), length), PAD, dtype=torch.long)
    mask = torch.zeros((len(seqs), length), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def encode_image(v, encoder: VisionEncoder) -> EmbeddingSet:
    """Encode one volume (or (X, Y, Z) array); returns unbatched tensors."""
    data = v.data if isinstance(v, Volume) else v
    x = torch.as_tensor(np.asarray(data), dtype=next(encoder.parameters()).dtype)[None]
    out = encoder(x)
    return EmbeddingSet(out.dense_tokens[0], out.pooled[0])


def encode_text(t: TokenSequence, encoder: TextEncoder) -> EmbeddingSet:
    ids, mask = batch_token_sequences([t])
    out = encoder(ids, mask)
    return EmbeddingSet(out.dense_tokens[0], out.pooled[0])
