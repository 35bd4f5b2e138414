"""Position encodings and attention variants.

Three mechanisms sit on top of the autodiff engine here:

* sinusoidal absolute position encoding (APE),
* deformable gloss attention: each frame attends to K frames sampled at
  learnable fractional offsets inside a +/-R window,
* contextual position encoding (CoPE): positions are accumulated sigmoid
  gates, and interpolated position embeddings bias the attention logits.

Tensors are batch-first: ``[B, T, D]`` activations, ``[B, H, T, d]`` per-head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_FILL = -1e9


@dataclass(frozen=True)
class ApeTable:
    """Precomputed sinusoid table ``[t_max, dim]``."""

    table: np.ndarray

    @classmethod
    def build(cls, dim: int, t_max: int = 512) -> "ApeTable":
        pos = np.arange(t_max, dtype=np.float64)[:, None]
        i = np.arange(0, dim, 2, dtype=np.float64)
        freq = np.power(10000.0, -i / dim)
        table = np.zeros((t_max, dim), dtype=np.float64)
        table[:, 0::2] = np.sin(pos * freq)
        table[:, 1::2] = np.cos(pos * freq[: dim // 2])
        return cls(table)

    @property
    def t_max(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass
class GlossAttentionConfig:
    heads: int = 8
    samples: int = 8
    radius: float = 16.0

    def initial_offsets(self) -> np.ndarray:
        """Offsets evenly spanning ``[-radius, radius]`` for every head."""
        row = np.linspace(-self.radius, self.radius, self.samples) if self.samples > 1 else np.zeros(1)
        return np.tile(row, (self.heads, 1))


@dataclass
class CopeConfig:
    p_max: int = 128
    mode: str = "prefix"


@dataclass
class MaskSet:
    """Source padding mask ``[B, T_src]`` and causal target mask ``[L, L]``."""

    src_pad_mask: np.ndarray
    tgt_causal_mask: np.ndarray

    @property
    def src_lengths(self) -> np.ndarray:
        return self.src_pad_mask.sum(axis=-1).astype(np.int64)


def build_masks(src_lengths: Sequence[int], tgt_length: int, src_max: Optional[int] = None) -> MaskSet:
    """Padding mask (1 on real frames) plus an inclusive lower-triangular mask."""
    lengths = np.asarray(src_lengths, dtype=np.int64)
    if lengths.size == 0 or (lengths < 1).any() or tgt_length < 1:
        raise ValueError(f"build_masks: lengths must be >= 1, got {list(lengths)} / {tgt_length}")
    t = int(lengths.max()) if src_max is None else src_max
    pad = (np.arange(t)[None, :] < lengths[:, None]).astype(np.float32)
    causal = np.tril(np.ones((tgt_length, tgt_length), dtype=np.float32))
    return MaskSet(pad, causal)


def ape_add(x: Tensor, table: ApeTable, scale: Optional[float] = None) -> Tensor:
    """Return ``x * scale + table[:T]``; ``scale`` defaults to sqrt(D)."""
    t, d = x.shape[-2], x.shape[-1]
    if t > table.t_max:
        raise ValueError(f"ape_add: sequence length {t} exceeds table length {table.t_max}")
    if d != table.dim:
        raise ad.ShapeError(f"ape_add: hidden size {d} vs table {table.dim}")
    scale = math.sqrt(d) if scale is None else scale
    return x * scale + Tensor(table.table[:t].astype(x.dtype))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def linear(x: Tensor, params: dict, prefix: str) -> Tensor:
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    if d % heads:
        raise ad.ShapeError(f"hidden size {d} not divisible by {heads} heads")
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


# ---------------------------------------------------------------------------
# CoPE
# ---------------------------------------------------------------------------


def cope_positions(
    q: Tensor,
    k: Tensor,
    mode: str = "prefix",
    p_max: Optional[float] = None,
    scale: float = 1.0,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Contextual positions from accumulated sigmoid gates.

    ``g[i, j] = sigmoid(scale * q[i] . k[j])``. Modes:

    * ``causal``: ``p[i, j] = sum_{t=j..i} g[i, t]`` (requires Q == T);
    * ``prefix``: ``p[i, j] = sum_{t<=j} g[i, t]``;
    * ``suffix``: ``p[i, j] = sum_{t>=j} g[i, t]``.

    ``q`` is ``[..., Q, d]`` and ``k`` is ``[..., T, d]``. ``key_mask``
    (broadcastable to ``[..., Q, T]``) zeroes gates of padded keys. The
    result is capped at ``p_max``.
    """
    logits = q @ k.swapaxes(-1, -2)
    if scale != 1.0:
        logits = logits * scale
    return cope_positions_from_logits(logits, mode, p_max, key_mask)


def cope_positions_from_logits(
    logits: Tensor, mode: str = "prefix", p_max: Optional[float] = None, key_mask=None
) -> Tensor:
    gates = ad.sigmoid(logits)
    qn, tn = logits.shape[-2], logits.shape[-1]
    if mode == "causal":
        if qn != tn:
            raise ad.ShapeError(f"cope_positions: causal mode needs square logits, got {qn}x{tn}")
        tri = np.tril(np.ones((qn, tn), dtype=logits.dtype))
        key_mask = tri if key_mask is None else key_mask * tri
    if key_mask is not None:
        gates = gates * Tensor(np.asarray(key_mask, dtype=logits.dtype))
    if mode == "prefix":
        pos = ad.cumsum(gates, axis=-1)
    elif mode in ("causal", "suffix"):
        pos = ad.cumsum(gates, axis=-1, reverse=True)
    else:
        raise ValueError(f"cope_positions: unknown mode {mode!r}")
    if p_max is not None:
        pos = ad.clamp(pos, None, p_max)
    return pos


def cope_logit_bias(q: Tensor, positions: Tensor, embeddings: Tensor) -> Tensor:
    """Interpolated position-embedding logits.

    Args:
        q: ``[..., Q, d]`` queries.
        positions: ``[..., Q, T]`` in ``[0, p_max]``.
        embeddings: ``[..., p_max + 1, d]`` (a leading head axis broadcasts).

    Returns:
        ``bias[i, j] = (1 - z) q[i].e[floor p] + z q[i].e[ceil p]``.
    """
    p_rows = embeddings.shape[-2]
    if positions.data.min(initial=0.0) < 0 or positions.data.max(initial=0.0) > p_rows - 1:
        raise AssertionError("cope_logit_bias: positions outside [0, p_max]")
    per_pos = q @ embeddings.swapaxes(-1, -2)  # [..., Q, P+1]
    lead = per_pos.shape[:-1]
    seq = per_pos.reshape(lead + (p_rows, 1))
    out = ad.interp_gather(seq, positions)
    return out.reshape(positions.shape)


# ---------------------------------------------------------------------------
# attention variants
# ---------------------------------------------------------------------------


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[np.ndarray] = None,
    cope_emb: Optional[Tensor] = None,
    cope: Optional[CopeConfig] = None,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Per-head attention over ``[B, H, L, d]`` tensors.

    ``mask`` is a boolean keep-mask broadcastable to ``[B, H, Lq, Lk]``.
    When ``cope_emb`` (``[H, p_max+1, d]``) is given, CoPE logits are added
    with gates from the scaled logits; ``key_mask`` zeroes padded-key gates.
    """
    dh = q.shape[-1]
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if cope_emb is not None:
        cfg = cope or CopeConfig()
        pos = cope_positions_from_logits(logits, cfg.mode, cfg.p_max, key_mask)
        logits = logits + cope_logit_bias(q, pos, cope_emb)
    weights = ad.softmax(logits, axis=-1, mask=mask)
    return weights @ v


def multi_head_attention(
    xq: Tensor,
    xkv: Tensor,
    params: dict,
    prefix: str,
    heads: int,
    mask: Optional[np.ndarray] = None,
    cope: Optional[CopeConfig] = None,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Projected multi-head attention ``[B, Lq, D] x [B, Lk, D] -> [B, Lq, D]``.

    Parameters are read from ``params[prefix + ".q.weight"]`` and friends; a
    ``prefix + ".cope_emb"`` entry is used when ``cope`` is set.
    """
    d = xq.shape[-1]
    if d % heads:
        raise ad.ShapeError(f"multi_head_attention: hidden size {d} not divisible by {heads} heads")
    q = split_heads(linear(xq, params, prefix + ".q"), heads)
    k = split_heads(linear(xkv, params, prefix + ".k"), heads)
    v = split_heads(linear(xkv, params, prefix + ".v"), heads)
    cope_emb = params[prefix + ".cope_emb"] if cope is not None else None
    ctx = scaled_dot_attention(q, k, v, mask, cope_emb, cope, key_mask)
    return linear(merge_heads(ctx), params, prefix + ".o")


def gloss_positions(offsets: Tensor, t: int, radius: float, order: Optional[np.ndarray] = None) -> Tensor:
    """Sample positions ``i + clamp(offset[h, k], -R, R)`` as ``[H, T, K]``.

    ``order`` permutes each head's samples (used to sort them temporally).
    """
    off = ad.clamp(offsets, -radius, radius)
    if order is not None:
        off = off[np.arange(off.shape[0])[:, None], order]
    base = Tensor(np.arange(t, dtype=offsets.dtype)[None, :, None])
    return base + off[:, None, :]


def gloss_attention(
    x: Tensor,
    params: dict,
    prefix: str,
    cfg: GlossAttentionConfig,
    lengths: Optional[np.ndarray] = None,
    cope: Optional[CopeConfig] = None,
) -> Tensor:
    """Deformable local attention over ``x[B, T, D]``.

    Query ``i`` of head ``h`` attends to K keys/values linearly interpolated
    at ``i + offset[h, k]`` (offsets clamped to +/-R, positions clamped to
    each sequence's ``[0, length - 1]`` so padding is never sampled). With
    ``cope``, gates over the temporally sorted samples are accumulated in
    prefix order and turned into a logit bias.
    """
    b, t, d = x.shape
    heads = cfg.heads
    offsets = params[prefix + ".offsets"]
    kn = offsets.shape[1]
    q = split_heads(linear(x, params, prefix + ".q"), heads)  # [B,H,T,dh]
    k = split_heads(linear(x, params, prefix + ".k"), heads)
    v = split_heads(linear(x, params, prefix + ".v"), heads)
    dh = d // heads

    order = np.argsort(offsets.data, axis=1, kind="stable") if cope is not None else None
    pos = gloss_positions(offsets, t, cfg.radius, order).reshape(1, heads, t * kn)
    if lengths is None:
        upper = None
    else:
        upper = (np.asarray(lengths) - 1).astype(x.dtype).reshape(b, 1, 1)
    ks = ad.interp_gather(k, pos, upper).reshape(b, heads, t, kn, dh)
    vs = ad.interp_gather(v, pos, upper).reshape(b, heads, t, kn, dh)

    qe = q.reshape(b, heads, t, 1, dh)
    logits = (qe @ ks.swapaxes(-1, -2)).reshape(b, heads, t, kn) * (1.0 / math.sqrt(dh))
    if cope is not None:
        positions = cope_positions_from_logits(logits, "prefix", cope.p_max)
        logits = logits + cope_logit_bias(q, positions, params[prefix + ".cope_emb"])
    weights = ad.softmax(logits, axis=-1)
    ctx = (weights.reshape(b, heads, t, 1, kn) @ vs).reshape(b, heads, t, dh)
    return linear(merge_heads(ctx), params, prefix + ".o")
