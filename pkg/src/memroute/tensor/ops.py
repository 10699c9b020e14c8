"""Differentiable operations on :class:`~memroute.tensor.core.Tensor`.

Each op computes its forward value with numpy and registers a backward closure
returning one gradient (or ``None``) per input.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from memroute.errors import ConfigError, ShapeError
from memroute.tensor.core import Tensor, as_tensor


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = (d * cdf).astype(d.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        return (g * (cdf + d * pdf),)

    return Tensor._from_op(out, (x,), backward, "gelu")


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward ``hard`` exactly; backward routes the gradient to ``soft``."""
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")
    return Tensor._from_op(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for ndim {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.data.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.sum(axis=axes, keepdims=keepdims) / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.data.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return Tensor._from_op(out.copy(), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for ndim {x.ndim}")
    inv = np.argsort([a % x.ndim for a in axes])
    out = np.asarray(x.data.transpose(axes), order="C")
    return Tensor._from_op(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    return Tensor._from_op(out, (x,), lambda g: (unbroadcast(g, x.shape),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.dtype != tensors[0].data.dtype:
            raise TypeError("concat: dtype mismatch")
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}, {start + length}) outside axis of size {x.shape[axis]}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return Tensor._from_op(x.data[sl].copy(), (x,), backward, "narrow")


def split(x: Tensor, sections, axis: int = 0) -> list:
    """Split into ``sections`` equal parts (int) or parts of the given sizes."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or n % sections:
            raise ShapeError(f"axis of size {n} does not split into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if np.sum(sizes) != n:
            raise ShapeError(f"split sizes {sizes} do not add up to {n}")
    parts, start = [], 0
    for s in sizes:
        parts.append(narrow(x, axis, start, s))
        start += s
    return parts


def _check_index(idx, n: int, unique: bool) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for axis of size {n}: {idx.tolist()}")
    if unique and np.unique(idx).size != idx.size:
        raise IndexError(f"duplicate indices: {idx.tolist()}")
    return idx


def take(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather slices ``idx`` along ``axis``."""
    axis = axis % x.ndim
    idx = _check_index(idx, x.shape[axis], unique=False)
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._from_op(out, (x,), backward, "take")


def scatter(values: Tensor, idx, axis: int = 0, base: Optional[Tensor] = None,
            size: Optional[int] = None) -> Tensor:
    """Write ``values`` into slices ``idx`` of ``base`` (zeros of length ``size`` if absent)."""
    axis = axis % values.ndim
    if base is None:
        if size is None:
            raise ShapeError("scatter needs either base or size")
        shape = list(values.shape)
        shape[axis] = size
        base = Tensor(np.zeros(shape, dtype=values.data.dtype))
    if base.data.dtype != values.data.dtype:
        raise TypeError("scatter: dtype mismatch")
    idx = _check_index(idx, base.shape[axis], unique=True)
    exp_shape = list(base.shape)
    exp_shape[axis] = idx.size
    if tuple(exp_shape) != values.shape:
        raise ShapeError(f"scatter: values {values.shape} do not fit {idx.size} slots of {base.shape}")
    out = base.data.copy()
    np.moveaxis(out, axis, 0)[idx] = np.moveaxis(values.data, axis, 0)

    def backward(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            np.moveaxis(gb, axis, 0)[idx] = 0
        gv = np.take(g, idx, axis=axis) if values.requires_grad else None
        return gv, gb

    return Tensor._from_op(out, (values, base), backward, "scatter")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError(f"layer_norm: last dim {D} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv_std * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gbias

    return Tensor._from_op(out.astype(x.data.dtype), (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _same_pad(k: int, padding, what: str) -> int:
    if k % 2 == 0:
        raise ConfigError(f"{what} kernel size must be odd, got {k}")
    return k // 2 if padding is None else int(padding)


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding=None) -> Tensor:
    """Per-channel 2-D cross-correlation. ``x``: [B,C,H,W], ``kernel``: [C,kh,kw].

    ``padding`` defaults to same-padding (``k // 2`` on each side).
    """
    if x.ndim != 4 or kernel.ndim != 3 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} vs kernel {kernel.shape}")
    C, kh, kw = kernel.shape
    if isinstance(padding, (tuple, list)):
        ph, pw = padding
    else:
        ph = pw = padding
    ph = _same_pad(kh, ph, "depthwise")
    pw = _same_pad(kw, pw, "depthwise")
    H, W = x.shape[2:]
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} too large for input {H}x{W} with padding {ph},{pw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    k = kernel.data
    out = np.zeros(x.shape[:2] + (Ho, Wo), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            out += xp[:, :, u:u + Ho, v:v + Wo] * k[None, :, u, v, None, None]

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + Ho, v:v + Wo] += g * k[None, :, u, v, None, None]
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if kernel.requires_grad:
            gk = np.empty_like(k)
            for u in range(kh):
                for v in range(kw):
                    gk[:, u, v] = (g * xp[:, :, u:u + Ho, v:v + Wo]).sum(axis=(0, 2, 3))
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward, "depthwise_conv2d")


def conv1d(x: Tensor, kernel: Tensor, padding=None) -> Tensor:
    """Single-filter 1-D cross-correlation along the last axis (e.g. [B,1,C])."""
    if kernel.ndim != 1:
        raise ShapeError(f"conv1d kernel must be 1-d, got {kernel.shape}")
    kw = kernel.shape[0]
    p = _same_pad(kw, padding, "conv1d")
    L = x.shape[-1]
    Lo = L + 2 * p - kw + 1
    if Lo <= 0:
        raise ShapeError(f"kernel {kw} too large for length {L} with padding {p}")
    pad = [(0, 0)] * (x.ndim - 1) + [(p, p)]
    xp = np.pad(x.data, pad)
    k = kernel.data
    out = np.zeros(x.shape[:-1] + (Lo,), dtype=x.data.dtype)
    for u in range(kw):
        out += xp[..., u:u + Lo] * k[u]

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kw):
                gxp[..., u:u + Lo] += g * k[u]
            gx = gxp[..., p:p + L]
        if kernel.requires_grad:
            gk = np.array([(g * xp[..., u:u + Lo]).sum() for u in range(kw)], dtype=k.dtype)
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward, "conv1d")
