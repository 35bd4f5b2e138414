"""Dense tensors with tape-based reverse-mode differentiation.

The engine stores values as numpy arrays (float32 by default, float64 when
the inputs are float64, which is how the finite-difference checks run) and
records one node per differentiable operation on the active :class:`Tape`.
:func:`backward` walks the tape in reverse creation order exactly once.

Only the operations the Signformer model needs are provided; composite
kernels (layer norm, depthwise convolution, masked softmax, interpolated
gathering) are fused so their backward rules stay cheap.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

DEFAULT_DTYPE = np.float32
CHECK_FINITE = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """N-dimensional float array that can take part in differentiation.

    Args:
        data: Anything ``np.asarray`` accepts. Integer input is converted to
            the default float dtype.
        requires_grad: Whether gradients should accumulate into ``grad``.
        name: Optional label, used in error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._leaf = True

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = f(x)
        backward(loss, tape)
    """

    nodes: list = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()


_TAPES: list = [Tape()]
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; ops inside return constants."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check(out: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite values in output")


def _result(out: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``out`` and record a node when any input needs a gradient."""
    _check(out, op)
    t = Tensor(out, dtype=out.dtype)
    if _GRAD_ENABLED[-1] and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._leaf = False
        _TAPES[-1].record(Node(inputs, t, backward_fn, op))
    return t


record_op = _result
"""Public alias used by fused ops defined outside this module."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _pair(a, b) -> tuple:
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    return a, b


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):  # reported by the finiteness check instead
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is constant)."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        ga = _unbroadcast(np.where(mask, g, 0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.where(mask, a.data, b.data).astype(a.dtype), (a, b), bw, "where")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping was active."""
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    out = np.clip(a.data, lo_, hi_)
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _result(out, (a,), lambda g: (g * inside,), "clamp")


def cumsum(a: Tensor, axis: int = -1, reverse: bool = False) -> Tensor:
    """Inclusive cumulative sum; ``reverse`` accumulates from the end."""
    if reverse:
        out = np.flip(np.cumsum(np.flip(a.data, axis), axis=axis), axis)
    else:
        out = np.cumsum(a.data, axis=axis)

    def bw(g):
        if reverse:
            return (np.cumsum(g, axis=axis),)
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _result(np.ascontiguousarray(out), (a,), bw, "cumsum")


# ---------------------------------------------------------------------------
# Activations and normalisation
# ---------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu6(a: Tensor) -> Tensor:
    """min(max(x, 0), 6); the subgradient at both kinks is 0."""
    x = a.data
    out = np.minimum(np.maximum(x, 0), 6).astype(x.dtype)
    slope = (x > 0) & (x < 6)
    return _result(out, (a,), lambda g: (g * slope,), "relu6")


def swish(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "swish")


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half."""
    n = a.shape[axis]
    if n % 2:
        raise ShapeError(f"glu: axis {axis} has odd size {n}")
    value, gate = np.split(a.data, 2, axis=axis)
    s = _sigmoid_np(gate)

    def bw(g):
        return (np.concatenate([g * s, g * value * s * (1.0 - s)], axis=axis),)

    return _result(value * s, (a,), bw, "glu")


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None, fill: float = -1e9) -> Tensor:
    """Numerically stable softmax with an optional boolean keep-mask.

    Masked entries are filled with ``fill`` before normalising. Rows where
    every entry is masked output zeros.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x = np.where(mask, x, fill)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = (e / denom).astype(a.dtype)
    if mask is not None:
        live = mask.any(axis=axis, keepdims=True)
        out = out * live
        if out.shape != a.shape:
            out = np.broadcast_to(out, a.shape)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = out * (g - dot)
        if mask is not None:
            gx = np.where(mask, gx, 0)
        return (gx.astype(a.dtype),)

    return _result(np.ascontiguousarray(out, dtype=a.dtype), (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=axis, keepdims=True, dtype=np.float64)) + m
    out = (x - lse).astype(a.dtype)

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis (biased variance, 64-bit statistics)."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = (g * gain.data).astype(np.float64)
            xh = xhat.astype(np.float64)
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
            gx = gx.astype(x.dtype)
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out.astype(x.dtype), (x, gain, bias), bw, "layer_norm")


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    mask: Optional[np.ndarray] = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over every axis but the last.

    In training mode, statistics come from the unmasked positions and the
    running buffers are updated in place. Otherwise the running statistics
    are used and treated as constants.
    """
    c = x.shape[-1]
    xd = x.data.astype(np.float64)
    if mask is None:
        m = np.ones(x.shape[:-1] + (1,), dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64)[..., None]
    if training:
        n = float(m.sum())
        if n < 1:
            raise ShapeError("batch_norm: no unmasked positions in batch mode")
        mu = (xd * m).reshape(-1, c).sum(0) / n
        var = (((xd - mu) ** 2) * m).reshape(-1, c).sum(0) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * n / max(n - 1.0, 1.0)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = ((xhat * gain.data + bias.data) * m).astype(x.dtype)

    def bw(g):
        gd = g.astype(np.float64) * m
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = gd * gain.data
            if training:
                n_ = m.sum()
                s1 = gh.reshape(-1, c).sum(0)
                s2 = (gh * xhat).reshape(-1, c).sum(0)
                gx = inv / n_ * (n_ * gh - s1 - xhat * s2) * m
            else:
                gx = gh * inv
            gx = gx.astype(x.dtype)
        ggain = (gd * xhat).sum(axis=lead).astype(x.dtype) if gain.requires_grad else None
        gbias = gd.sum(axis=lead).astype(x.dtype) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), bw, "batch_norm")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate`` is 0."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# Convolutions, lookups, interpolation
# ---------------------------------------------------------------------------


def conv1d_pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Kernel-size-1 convolution over ``x[..., T, Cin]`` with ``w[Cin, Cout]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"conv1d_pointwise: x {x.shape}, w {w.shape}, b {b.shape}")
    return add(matmul(x, w), b)


def conv1d_depthwise(x: Tensor, w: Tensor, b: Tensor, pad_mask: Optional[np.ndarray] = None) -> Tensor:
    """Per-channel temporal convolution with same-length output.

    Args:
        x: ``[..., T, C]`` input.
        w: ``[C, K]`` kernel, K odd. Cross-correlation convention:
            ``out[t] = sum_k w[k] * x[t + k - (K-1)/2]``.
        b: ``[C]`` bias.
        pad_mask: ``[..., T]`` of 0/1. Padded frames are zeroed on input and
            on output so they can never leak into valid frames.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv1d_depthwise: x {x.shape}, w {w.shape}, b {b.shape}")
    k = w.shape[1]
    if k % 2 == 0:
        raise ShapeError(f"conv1d_depthwise: kernel size must be odd, got {k}")
    p = (k - 1) // 2
    t = x.shape[-2]
    m = None if pad_mask is None else np.asarray(pad_mask, dtype=x.dtype)[..., None]
    xin = x.data if m is None else x.data * m
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    win = np.lib.stride_tricks.sliding_window_view(np.pad(xin, pad), k, axis=-2)
    out = np.einsum("...tck,ck->...tc", win, w.data) + b.data
    if m is not None:
        out = out * m
    out = out.astype(x.dtype)

    def bw(g):
        if m is not None:
            g = g * m
        gx = gw = gb = None
        if x.requires_grad:
            gwin = np.lib.stride_tricks.sliding_window_view(np.pad(g, pad), k, axis=-2)
            gx = np.einsum("...tck,ck->...tc", gwin, w.data[:, ::-1])
            if m is not None:
                gx = gx * m
        if w.requires_grad:
            c = w.shape[0]
            gw = np.einsum("nck,nc->ck", win.reshape(-1, c, k), g.reshape(-1, c))
        if b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(0)
        return gx, gw, gb

    assert out.shape[-2] == t
    return _result(out, (x, w, b), bw, "conv1d_depthwise")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table[V, D]``; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    bad = (ids < 0) | (ids >= v)
    if bad.any():
        raise IndexError(f"embedding_lookup: id {int(ids[bad].reshape(-1)[0])} out of range [0, {v})")

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "embedding_lookup")


def interp_gather(seq: Tensor, pos, upper=None) -> Tensor:
    """Linear interpolation of rows at fractional positions.

    Args:
        seq: ``[..., T, D]`` rows to sample from.
        pos: ``[..., Q]`` positions; leading axes broadcast against ``seq``'s.
            Positions are clamped to ``[0, upper]`` first (clamped entries get
            zero gradient).
        upper: Largest valid position, scalar or array broadcastable to
            ``pos`` (defaults to ``T - 1``). Used to keep samples inside each
            sequence's unpadded length.

    Returns:
        ``[..., Q, D]`` with ``out[q] = (1 - z) * seq[f] + z * seq[f + 1]``,
        ``f = floor(p)``, ``z = p - f``.
    """
    if seq.ndim < 2 or seq.shape[-2] < 1:
        raise ShapeError(f"interp_gather: empty or malformed sequence {seq.shape}")
    pos = as_tensor(pos, dtype=seq.dtype)
    t = seq.shape[-2]
    d = seq.shape[-1]
    hi = np.asarray(t - 1 if upper is None else upper, dtype=pos.dtype)
    pd = pos.data
    pc = np.minimum(np.maximum(pd, 0), hi)
    inside = (pd >= 0) & (pd <= hi)
    f = np.floor(pc)
    z = (pc - f).astype(seq.dtype)
    fi = f.astype(np.int64)
    ci = np.minimum(fi + 1, hi.astype(np.int64))

    pshape = np.broadcast_shapes(pos.shape, hi.shape)
    lead = np.broadcast_shapes(seq.shape[:-2], pshape[:-1])
    q = pshape[-1]
    n = int(np.prod(lead)) if lead else 1
    seq_b = np.broadcast_to(seq.data, lead + (t, d)).reshape(n, t, d)
    fi_b = np.broadcast_to(fi, lead + (q,)).reshape(n, q)
    ci_b = np.broadcast_to(ci, lead + (q,)).reshape(n, q)
    z_b = np.broadcast_to(z, lead + (q,)).reshape(n, q, 1)
    rows = np.arange(n)[:, None]
    lo_rows = seq_b[rows, fi_b]
    hi_rows = seq_b[rows, ci_b]
    out = ((1 - z_b) * lo_rows + z_b * hi_rows).reshape(lead + (q, d))

    def bw(g):
        gb = g.reshape(n, q, d)
        gs = gp = None
        if seq.requires_grad:
            flat = np.zeros((n * t, d), dtype=g.dtype)
            base = (rows * t)
            np.add.at(flat, (base + fi_b).reshape(-1), (gb * (1 - z_b)).reshape(-1, d))
            np.add.at(flat, (base + ci_b).reshape(-1), (gb * z_b).reshape(-1, d))
            gs = _unbroadcast(flat.reshape(lead + (t, d)), seq.shape)
        if pos.requires_grad:
            slope = (gb * (hi_rows - lo_rows)).sum(-1).reshape(lead + (q,))
            slope = slope * np.broadcast_to(inside, lead + (q,))
            gp = _unbroadcast(slope, pos.shape)
        return gs, gp

    return _result(out.astype(seq.dtype), (seq, pos), bw, "interp_gather")


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Optional[Tape] = None, retain: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it.

    Gradients are added to existing buffers. The tape is cleared afterwards
    unless ``retain`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = tape if tape is not None else current_tape()
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._leaf:
        if loss.requires_grad:
            _accumulate(loss, seed)
        if not retain:
            tape.clear()
        return
    pending = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    if not retain:
        tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`: worst relative error per input."""

    errors: dict
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_coords: Optional[int] = None,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    Inputs are copied to float64. Non-scalar outputs are reduced with a fixed
    random projection. The error for an input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``
    over the checked coordinates; ``max_coords`` samples a random subset of
    coordinates per input to bound cost. The floor keeps inputs whose true
    gradient is exactly zero from being judged on rounding noise alone.
    """
    rng = np.random.default_rng(seed)
    xs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
    probe = {}

    def scalar(*args) -> Tensor:
        out = f(*args)
        if out.size == 1:
            return out.reshape(())
        if "w" not in probe:
            probe["w"] = rng.standard_normal(out.shape)
        return tsum(mul(out, Tensor(probe["w"], dtype=np.float64)))

    with Tape() as tape:
        loss = scalar(*xs)
        backward(loss, tape)

    errors = {}
    for idx, x in enumerate(xs):
        label = names[idx] if names else f"input{idx}"
        analytic = np.zeros(x.shape) if x.grad is None else x.grad
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        flat = x.data.reshape(-1)
        num = np.zeros(len(coords))
        with no_grad():
            for j, c in enumerate(coords):
                old = flat[c]
                flat[c] = old + h
                fp = float(scalar(*xs).data)
                flat[c] = old - h
                fm = float(scalar(*xs).data)
                flat[c] = old
                num[j] = (fp - fm) / (2 * h)
        ana = analytic.reshape(-1)[coords]
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        errors[label] = float(np.abs(ana - num).max(initial=0.0) / scale)
    return GradCheckReport(errors, tol)
