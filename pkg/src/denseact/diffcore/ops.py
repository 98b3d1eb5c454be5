"""Differentiable primitives used by the network.

Broadcasting is limited to what the layers need: a trailing-shape operand
(bias, gain, scalar) against a larger one.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tensor import SequenceTooShortError, ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    a = as_tensor(a)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        if p == 0:
            return (np.zeros_like(a.data),)
        return (g * p * a.data ** (p - 1),)

    return make_result(out, (a,), bw, "power")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the value was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    with np.errstate(under="ignore"):
        e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    # sigmoid(-x) from the same split, avoids cancellation in 1 - out
    neg = np.where(d >= 0, e / (1.0 + e), 1.0 / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * (out * neg),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = (d * cdf).astype(d.dtype, copy=False)

    def bw(g):
        # derivative crosses zero near x = -0.75; evaluate it in double
        d64 = d.astype(np.float64)
        with np.errstate(under="ignore"):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * d64 * d64)
        deriv = 0.5 * (1.0 + erf(d64 * _INV_SQRT2)) + d64 * pdf
        return (g * deriv.astype(d.dtype, copy=False),)

    return make_result(out, (x,), bw, "gelu")


# ------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_result(a.data[index], (a,), bw, "getitem")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Basic slice along the last axis (cheaper backward than ``getitem``)."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return make_result(a.data[..., start:stop], (a,), bw, "slice_last")


def pad_last(a: Tensor, before: int, after: int = 0) -> Tensor:
    """Zero-pad the last axis."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    n = a.shape[-1]
    return make_result(np.pad(a.data, width), (a,),
                       lambda g: (g[..., before:before + n],), "pad_last")


def take_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis with a 1-D integer index (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[-1]

    def bw(g):
        flat = g.reshape(-1, g.shape[-1])
        # scatter-add via a one-hot matrix keeps repeated indices vectorised
        onehot = np.zeros((index.size, n), dtype=g.dtype)
        onehot[np.arange(index.size), index] = 1.0
        out = flat @ onehot
        return (out.reshape(a.shape[:-1] + (n,)),)

    return make_result(a.data[..., index], (a,), bw, "take_last")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return make_result(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


# ----------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, batched 3-D, or batched 3-D against a 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch mismatch {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                gb = _unbroadcast(gb, b.shape)
        else:
            gb = None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------- normalisation

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s, (x,), bw, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gh = gb = None
        if x.requires_grad:
            gxh = g * gain.data
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gh = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gh, gb

    return make_result(out, (x, gain, bias), bw, "layer_norm")


# --------------------------------------------------------------- temporal

def conv_output_length(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal cross-correlation of ``x[T, Cin]`` with ``kernel[k, Cin, Cout]``.

    Zero padding on both ends; output length
    ``floor((T + 2*padding - k) / stride) + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 3:
        raise ShapeError(f"conv1d: expected x[T,Cin] and kernel[k,Cin,Cout], got {x.shape}, {kernel.shape}")
    t, cin = x.shape
    k, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv1d: input channels {cin} != kernel channels {kcin}")
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    if t + 2 * padding < k:
        raise SequenceTooShortError(f"conv1d: length {t} with padding {padding} is shorter than kernel {k}")
    t_out = conv_output_length(t, k, stride, padding)
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    span = stride * (t_out - 1) + 1
    # cols[t', j, c] = xp[t'*stride + j, c]
    cols = np.stack([xp[j:j + span:stride] for j in range(k)], axis=1)
    w2 = kernel.data.reshape(k * cin, cout)
    out = cols.reshape(t_out, k * cin) @ w2
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = gk = gbias = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(t_out, k, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[j:j + span:stride] += gcols[:, j]
            gx = gxp[padding:padding + t] if padding else gxp
        if kernel.requires_grad:
            gk = (cols.reshape(t_out, k * cin).T @ g).reshape(k, cin, cout)
        if bias is not None and bias.requires_grad:
            gbias = g.sum(axis=0)
        return (gx, gk, gbias) if bias is not None else (gx, gk)

    return make_result(out, parents, bw, "conv1d")


def interpolation_matrix(src_len: int, dst_len: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [dst_len, src_len]."""
    m = np.zeros((dst_len, src_len))
    if src_len == 1 or dst_len == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst_len) * (src_len - 1) / (dst_len - 1)
    lo = np.minimum(np.floor(pos).astype(int), src_len - 2)
    frac = pos - lo
    rows = np.arange(dst_len)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_linear(x: Tensor, target_len: int) -> Tensor:
    """Per-channel linear interpolation along time, endpoints mapped to endpoints."""
    x = as_tensor(x)
    if target_len < 1 or x.shape[0] < 1:
        raise ShapeError("upsample_linear: lengths must be >= 1")
    if target_len == x.shape[0]:
        return x
    m = interpolation_matrix(x.shape[0], target_len).astype(x.dtype)
    return make_result(m @ x.data, (x,), lambda g: (m.T @ g,), "upsample_linear")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
