"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and, when a tape is
active, records a closure computing the input gradients from the output
gradient.  Leading batch dimensions are accepted wherever the model needs
them; broadcasting is otherwise limited to bias-style trailing adds and
constant masks.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c_arr = x.data.dtype.type(c)
    return record("scale", x.data * c_arr, (x,), lambda g: (g * c_arr,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))
    return record("relu", out, (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return record("square", x.data * x.data, (x,), lambda g: (2 * x.data * g,))


# reductions and shape ----------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype)
    return record("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def index(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``index(h, (slice(None), -1))``."""
    out = np.ascontiguousarray(x.data[key])

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[key] = g
        return (gx,)

    return record("index", out, (x,), backward)


# linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` is either 2-D or has the same batch dims as ``a``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return record("matmul", out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the trailing dimension of ``x``."""
    if w.ndim != 2 or b.ndim != 1 or x.ndim < 1:
        raise DimensionError(f"linear: bad ranks x{x.shape} w{w.shape} b{b.shape}")
    if x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise DimensionError(f"linear: x{x.shape} w{w.shape} b{b.shape} do not line up")
    in_dim, out_dim = w.shape
    x2 = x.data.reshape(-1, in_dim)
    out = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (out_dim,))

    def backward(g):
        g2 = g.reshape(-1, out_dim)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return record("linear", out, (x, w, b), backward)


def conv_output_length(length: int, stride: int) -> int:
    return -(-length // stride)


def same_padding(length: int, kernel: int, stride: int) -> tuple[int, int]:
    """(left, right) zero padding giving ``ceil(length / stride)`` outputs; odd totals go right."""
    out_len = conv_output_length(length, stride)
    total = max((out_len - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Strided 1-D cross-correlation with "same" zero padding.

    ``x`` is ``(channels_in, length)`` or ``(batch, channels_in, length)``;
    ``kernel`` is ``(channels_out, channels_in, k)`` with ``k`` odd.
    """
    if stride < 1:
        raise ConfigError(f"conv1d_same: stride must be >= 1, got {stride}")
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d_same: kernel must be 3-D, got {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_same: kernel width must be odd, got {k}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv1d_same: bias {bias.shape} does not match {c_out} output channels")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or xd.shape[1] != c_in:
        raise DimensionError(f"conv1d_same: input {x.shape} does not match kernel {kernel.shape}")

    n, _, length = xd.shape
    out_len = conv_output_length(length, stride)
    left, right = same_padding(length, k, stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)[:, :, ::stride, :]
    # (n, out_len, c_in * k)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(n * out_len, c_in * k)
    wmat = kernel.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T + bias.data).reshape(n, out_len, c_out).transpose(0, 2, 1)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def backward(g):
        g3 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g3.transpose(0, 2, 1)).reshape(n * out_len, c_out)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, out_len, c_in, k)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            span = stride * (out_len - 1) + 1
            for j in range(k):
                dxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
            gx = dxp[:, :, left:left + length]
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        return gx, gk, gb

    return record("conv1d_same", out, (x, kernel, bias), backward)


# normalisation and probabilities -------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: x{x.shape} gain{gain.shape} shift{shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * rstd
    out = xhat * gain.data + shift.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gshift = g.sum(axis=lead) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gshift

    return record("layer_norm", out, (x, gain, shift), backward)


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_array(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool,
            shared_axes: tuple = ()) -> Tensor:
    """Inverted dropout.

    ``shared_axes`` lists axes along which one keep/drop decision is reused,
    so ``shared_axes=(-1,)`` on a ``(tokens, dim)`` tensor drops whole tokens.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    mask_shape = list(x.shape)
    for ax in shared_axes:
        mask_shape[ax] = 1
    keep = rng.random(tuple(mask_shape)) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    out = x.data * mask
    return record("dropout", out, (x,), lambda g: (_unbroadcast(g * mask, x.shape),))


def attention(q: Tensor, k: Tensor, v: Tensor, dropout_p: float = 0.0,
              rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
    """Unmasked scaled dot-product attention over ``(..., heads, tokens, head_dim)``."""
    if q.shape != k.shape or q.shape != v.shape or q.ndim < 3:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape} must match as (..., h, n, dk)")
    dk = q.shape[-1]
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = scale(matmul(q, transpose(k, perm)), 1.0 / math.sqrt(dk))
    weights = dropout(softmax(scores), dropout_p, rng, training)
    return matmul(weights, v)


def softmax_xent(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Cross-entropy in nats of integer ``target`` codes under ``softmax(logits)``.

    ``target`` has the shape of ``logits`` without its last axis.  The mean is
    accumulated in float64 before casting back.
    """
    n_classes = logits.shape[-1]
    t = np.asarray(target)
    if not np.issubdtype(t.dtype, np.integer):
        raise DataError(f"targets must be integer codes, got dtype {t.dtype}")
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"softmax_xent: target shape {t.shape} vs logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise DataError(f"target code out of range [0, {n_classes - 1}]")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    sum_exp = np.exp(shifted).sum(axis=-1, keepdims=True)
    log_z = np.log(sum_exp)
    picked = np.take_along_axis(shifted, t[..., None], axis=-1)
    per_item = (log_z - picked)[..., 0]

    if reduction == "none":
        out, weight = per_item, None
    elif reduction == "sum":
        out, weight = np.asarray(per_item.sum(dtype=np.float64), dtype=z.dtype), 1.0
    elif reduction == "mean":
        count = max(per_item.size, 1)
        out, weight = np.asarray(per_item.sum(dtype=np.float64) / count, dtype=z.dtype), 1.0 / count
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")

    def backward(g):
        probs = np.exp(shifted) / sum_exp
        np.put_along_axis(probs, t[..., None], np.take_along_axis(probs, t[..., None], axis=-1) - 1, axis=-1)
        if weight is None:
            return (probs * g[..., None],)
        return (probs * z.dtype.type(g * weight),)

    return record("softmax_xent", out, (logits,), backward)
