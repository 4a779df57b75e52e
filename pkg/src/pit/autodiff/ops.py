"""Differentiable primitives.

Each function computes its forward value with numpy and, when a tape is
active and some input requires a gradient, registers a closure returning the
input gradients. Broadcasting is limited to a missing leading batch axis.
"""
from __future__ import annotations

import builtins

import numpy as np
import scipy.linalg as sla

from ..errors import ShapeMismatch, SingularTriangular, TokenOutOfRange
from .tensor import Tensor, as_tensor, record

__all__ = [
    "matmul", "add", "sub", "mul", "scale", "transpose", "reshape", "row_gather",
    "concat", "split", "slice_last", "exp", "tanh", "sigmoid", "silu", "softplus",
    "sum", "mean", "rmsnorm", "masked_softmax", "cross_entropy", "tri_solve",
    "cholesky_factor", "rope", "split_heads", "merge_heads", "scale_channels",
]


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """``a @ b`` for (..., m, k) @ (k, n) or batched (N, m, k) @ (N, k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data
        k, n = b.shape

        def backward(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb
    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        out = a.data @ b.data

        def backward(g):
            ga = g @ _swap(b.data) if a.requires_grad else None
            gb = _swap(a.data) @ g if b.requires_grad else None
            return ga, gb
    else:
        raise ShapeMismatch(f"matmul: unsupported broadcast {a.shape} @ {b.shape}")
    return record(out, (a, b), backward)


def _batch_broadcast(a: Tensor, b: Tensor):
    """Return a reducer for a gradient flowing into a (possibly) broadcast operand."""
    if a.shape == b.shape:
        return None
    if a.shape[-b.ndim:] == b.shape and a.ndim > b.ndim:
        return "b"
    if b.shape[-a.ndim:] == a.shape and b.ndim > a.ndim:
        return "a"
    raise ShapeMismatch(f"shapes {a.shape} and {b.shape} differ beyond the batch axis")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _batch_broadcast(a, b)

    def backward(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _batch_broadcast(a, b)

    def backward(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                -_reduce_to(g, b.shape) if b.requires_grad else None)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return record(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch("transpose needs at least 2 dims")
    return record(np.ascontiguousarray(_swap(a.data)), (a,), lambda g: (_swap(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def row_gather(table, indices) -> Tensor:
    """Rows of a (V, d) table selected by an integer array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeMismatch("row_gather expects a 2-D table")
    if idx.dtype.kind not in "iu":
        raise TypeError("indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise TokenOutOfRange(f"index outside [0, {table.shape[0]})")
    flat = idx.reshape(-1)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(-1, table.shape[1]))
        return (gt,)

    return record(table.data[idx], (table,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    return record(a.data[..., start:stop], (a,), backward)


def split(a, sizes, axis: int = -1) -> list[Tensor]:
    """Split along the last axis into pieces of the given sizes."""
    a = as_tensor(a)
    if axis not in (-1, a.ndim - 1):
        raise ShapeMismatch("split only supports the last axis")
    if builtins.sum(sizes) != a.shape[-1]:
        raise ShapeMismatch(f"split sizes {sizes} do not cover {a.shape[-1]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_last(a, start, start + s))
        start += s
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record(y, (a,), lambda g: (g * y,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return record(y, (a,), lambda g: (g * (1 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return record(y, (a,), lambda g: (g * y * (1 - y),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    y = a.data * s
    return record(y, (a,), lambda g: (g * (s + y * (1 - s)),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    y = np.logaddexp(0, a.data).astype(a.dtype, copy=False)
    return record(y, (a,), lambda g: (g * _sigmoid(a.data),))


def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return record(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return record(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),))


def rmsnorm(x, weight, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * weight`` over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.shape != (x.shape[-1],):
        raise ShapeMismatch(f"rmsnorm weight {weight.shape} vs features {x.shape[-1]}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xh = x.data * r

    def backward(g):
        gw = (g * xh).reshape(-1, x.shape[-1]).sum(0) if weight.requires_grad else None
        gxh = g * weight.data
        gx = r * (gxh - xh * np.mean(gxh * xh, axis=-1, keepdims=True))
        return gx, gw

    return record(xh * weight.data, (x, weight), backward)


def masked_softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is boolean with True = attend."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    y = np.exp(z)
    y /= y.sum(axis=-1, keepdims=True)
    y = y.astype(x.dtype, copy=False)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return record(y, (x,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean next-token cross-entropy of (..., V) logits against integer targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"targets {t.shape} vs logits {logits.shape}")
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    flat = t.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= v):
        raise TokenOutOfRange("target id outside the vocabulary")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    n = flat.size
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, flat])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, flat] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def tri_solve(l, b, trans: bool = False) -> Tensor:
    """Solve ``L x = b`` (or ``L^T x = b`` with trans) for lower-triangular ``L``.

    Gradients: for ``x = L^{-1} b``, ``gb = L^{-T} g`` and ``gL = -tril(gb x^T)``;
    the transposed solve mirrors this with ``gL = -tril(x gb^T)``.
    """
    l, b = as_tensor(l), as_tensor(b)
    if l.ndim != 2 or l.shape[0] != l.shape[1] or b.ndim != 2 or b.shape[0] != l.shape[0]:
        raise ShapeMismatch(f"tri_solve: {l.shape} against {b.shape}")
    if np.any(np.diag(l.data) == 0):
        raise SingularTriangular("zero diagonal entry in triangular factor")
    x = sla.solve_triangular(l.data, b.data, lower=True, trans=1 if trans else 0, check_finite=False)

    def backward(g):
        gb = sla.solve_triangular(l.data, g, lower=True, trans=0 if trans else 1, check_finite=False)
        gl = None
        if l.requires_grad:
            gl = -np.tril(x @ gb.T) if trans else -np.tril(gb @ x.T)
        return gl, gb

    return record(x, (l, b), backward)


def cholesky_factor(log_diag, strict_lower, lo: float = -5.0, hi: float = 5.0) -> Tensor:
    """Assemble ``L`` with ``diag(L) = exp(clip(log_diag, lo, hi))`` and the given strict lower part."""
    log_diag, strict_lower = as_tensor(log_diag), as_tensor(strict_lower)
    d = log_diag.shape[0]
    rows, cols = np.tril_indices(d, -1)
    if strict_lower.shape != (rows.size,):
        raise ShapeMismatch(f"strict_lower must have {rows.size} entries")
    diag = np.exp(np.clip(log_diag.data, lo, hi))
    out = np.zeros((d, d), dtype=log_diag.dtype)
    out[rows, cols] = strict_lower.data
    out[np.arange(d), np.arange(d)] = diag
    inside = (log_diag.data >= lo) & (log_diag.data <= hi)

    def backward(g):
        return np.diag(g) * diag * inside, g[rows, cols]

    return record(out, (log_diag, strict_lower), backward)


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding (rotate-half convention) on (N, T, hd)."""
    x = as_tensor(x)
    half = x.shape[-1] // 2
    if cos.shape != x.shape[-2:]:
        raise ShapeMismatch(f"rope tables {cos.shape} vs {x.shape[-2:]}")

    def rot(u):
        return np.concatenate([-u[..., half:], u[..., :half]], axis=-1)

    def rot_t(u):
        return np.concatenate([u[..., half:], -u[..., :half]], axis=-1)

    y = x.data * cos + rot(x.data) * sin
    return record(y, (x,), lambda g: (g * cos + rot_t(g * sin),))


def split_heads(x, n_heads: int) -> Tensor:
    """(B, T, n*hd) -> (B*n, T, hd)."""
    x = as_tensor(x)
    b, t, f = x.shape
    if f % n_heads:
        raise ShapeMismatch(f"{f} features not divisible by {n_heads} heads")
    hd = f // n_heads
    y = x.data.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3).reshape(b * n_heads, t, hd)

    def backward(g):
        return (g.reshape(b, n_heads, t, hd).transpose(0, 2, 1, 3).reshape(b, t, f),)

    return record(y, (x,), backward)


def merge_heads(x, n_heads: int) -> Tensor:
    """(B*n, T, hd) -> (B, T, n*hd)."""
    x = as_tensor(x)
    bn, t, hd = x.shape
    b = bn // n_heads
    y = x.data.reshape(b, n_heads, t, hd).transpose(0, 2, 1, 3).reshape(b, t, n_heads * hd)

    def backward(g):
        return (g.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3).reshape(bn, t, hd),)

    return record(y, (x,), backward)


def scale_channels(x, w) -> Tensor:
    """Multiply the last axis of ``x`` by the vector ``w``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.shape != (x.shape[-1],):
        raise ShapeMismatch(f"channel scale {w.shape} vs {x.shape}")

    def backward(g):
        gw = (g * x.data).reshape(-1, w.shape[0]).sum(0) if w.requires_grad else None
        return g * w.data, gw

    return record(x.data * w.data, (x, w), backward)
