"""Differentiable operations over Tensor with hand-written backward rules.

All ops produce float64 outputs, check the result for non-finite values
(overflow raises instead of propagating inf), and register a backward
closure on the active tape when any input requires gradients. Backward
closures work on raw numpy arrays and accumulate in place; inputs whose
grad buffer is None are skipped.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, Tape, backward, maybe_record

__all__ = [
    "add", "sub", "mul", "scale", "add_bias", "relu", "gelu",
    "matmul", "transpose", "reshape", "log_softmax", "softmax",
    "reduce_sum", "reduce_mean", "take_rows", "embedding_lookup", "concat_rows",
    "slice_cols", "concat_cols", "cosine_rows", "smooth_l1",
    "adaptive_avg_pool", "layer_norm", "finite_diff_check",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(values: np.ndarray, inputs: tuple, backward_fn, name: str) -> Tensor:
    if not np.isfinite(values).all():
        raise FloatingPointError(f"{name}: non-finite values in result")
    out = Tensor(values)
    return maybe_record(out, inputs, backward_fn)


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        with np.errstate(all="ignore"):
            out = a.values + float(b)

        def bwd_const(g):
            if a.grad is not None:
                a.grad += g

        return _finish(out, (a,), bwd_const, "add")
    b = _as_tensor(b)
    _same_shape(a, b, "add")
    with np.errstate(all="ignore"):
        out = a.values + b.values

    def bwd(g):
        if a.grad is not None:
            a.grad += g
        if b.grad is not None:
            b.grad += g

    return _finish(out, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = _as_tensor(b)
    _same_shape(a, b, "sub")
    with np.errstate(all="ignore"):
        out = a.values - b.values

    def bwd(g):
        if a.grad is not None:
            a.grad += g
        if b.grad is not None:
            b.grad -= g

    return _finish(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    with np.errstate(all="ignore"):
        out = a.values * b.values

    def bwd(g):
        if a.grad is not None:
            a.grad += g * b.values
        if b.grad is not None:
            b.grad += g * a.values

    return _finish(out, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    with np.errstate(all="ignore"):
        out = a.values * c

    def bwd(g):
        if a.grad is not None:
            a.grad += g * c

    return _finish(out, (a,), bwd, "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-D bias row to every row of a 2-D tensor."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.values.ndim != 2 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ValueError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    with np.errstate(all="ignore"):
        out = x.values + bias.values[None, :]

    def bwd(g):
        if x.grad is not None:
            x.grad += g
        if bias.grad is not None:
            bias.grad += g.sum(axis=0)

    return _finish(out, (x, bias), bwd, "add_bias")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.values, 0.0)

    def bwd(g):
        if a.grad is not None:
            a.grad += g * (a.values > 0.0)

    return _finish(out, (a,), bwd, "relu")


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.values
    with np.errstate(all="ignore"):
        inner = _GELU_C * (x + _GELU_A * x**3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.grad is not None:
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
            a.grad += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner)

    return _finish(out, (a,), bwd, "gelu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    with np.errstate(all="ignore"):
        out = a.values @ b.values

    def bwd(g):
        if a.grad is not None:
            a.grad += g @ b.values.T
        if b.grad is not None:
            b.grad += a.values.T @ g

    return _finish(out, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    out = a.values.T.copy()

    def bwd(g):
        if a.grad is not None:
            a.grad += g.T

    return _finish(out, (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.values.reshape(shape).copy()

    def bwd(g):
        if a.grad is not None:
            a.grad += g.reshape(a.values.shape)

    return _finish(out, (a,), bwd, "reshape")


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax over the last axis, max-shifted for stability."""
    x = _as_tensor(x)
    if x.values.ndim < 1:
        raise ValueError("log_softmax: needs at least one axis")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    with np.errstate(all="ignore"):
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        if x.grad is not None:
            p = np.exp(out)
            x.grad += g - p * g.sum(axis=-1, keepdims=True)

    return _finish(out, (x,), bwd, "log_softmax")


def softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim < 1:
        raise ValueError("softmax: needs at least one axis")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    with np.errstate(all="ignore"):
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.grad is not None:
            x.grad += p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _finish(p, (x,), bwd, "softmax")


def _check_axis(x: Tensor, axis, name: str):
    if axis is None:
        return None
    axis = int(axis)
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ValueError(f"{name}: axis {axis} out of range for shape {x.shape}")
    return axis % x.values.ndim


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis, "reduce_sum")
    with np.errstate(all="ignore"):
        out = x.values.sum(axis=axis)

    def bwd(g):
        if x.grad is not None:
            if axis is None:
                x.grad += g
            else:
                x.grad += np.expand_dims(g, axis)

    return _finish(out, (x,), bwd, "reduce_sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis, "reduce_mean")
    count = x.values.size if axis is None else x.values.shape[axis]
    if count == 0:
        raise ValueError("reduce_mean: empty reduction")
    with np.errstate(all="ignore"):
        out = x.values.mean(axis=axis)

    def bwd(g):
        if x.grad is not None:
            if axis is None:
                x.grad += g / count
            else:
                x.grad += np.expand_dims(g, axis) / count

    return _finish(out, (x,), bwd, "reduce_mean")


def take_rows(x: Tensor, ids) -> Tensor:
    """Gather rows by index; doubles as embedding lookup."""
    x = _as_tensor(x)
    idx = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"take_rows: ids must be a flat index list, got shape {idx.shape}")
    n = x.values.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"take_rows: row id out of range for {n} rows")
    out = x.values[idx]

    def bwd(g):
        if x.grad is not None:
            np.add.at(x.grad, idx, g)

    return _finish(out, (x,), bwd, "take_rows")


# Gathering rows of an id-indexed table is exactly an embedding lookup.
embedding_lookup = take_rows


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows: empty input list")
    out = np.concatenate([p.values for p in parts], axis=0)
    sizes = [p.values.shape[0] for p in parts]

    def bwd(g):
        lo = 0
        for p, size in zip(parts, sizes):
            if p.grad is not None:
                p.grad += g[lo : lo + size]
            lo += size

    return _finish(out, tuple(parts), bwd, "concat_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ValueError(f"slice_cols: expected a 2-D tensor, got shape {x.shape}")
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"slice_cols: bad range [{start}, {stop}) for width {x.shape[1]}")
    out = x.values[:, start:stop].copy()

    def bwd(g):
        if x.grad is not None:
            x.grad[:, start:stop] += g

    return _finish(out, (x,), bwd, "slice_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_cols: empty input list")
    out = np.concatenate([p.values for p in parts], axis=1)
    sizes = [p.values.shape[1] for p in parts]

    def bwd(g):
        lo = 0
        for p, size in zip(parts, sizes):
            if p.grad is not None:
                p.grad += g[:, lo : lo + size]
            lo += size

    return _finish(out, tuple(parts), bwd, "concat_cols")


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """All-pairs cosine similarity between rows of a [P x D] and b [Q x D]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_rows: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    na = np.linalg.norm(av, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    dot = av @ bv.T
    den = na[:, None] * nb[None, :] + eps
    out = dot / den

    def bwd(g):
        gd = g / den
        # d(dot)/d(a), d(dot)/d(b)
        if a.grad is not None:
            a.grad += gd @ bv
        if b.grad is not None:
            b.grad += gd.T @ av
        # d(den) path through the row norms, guarded for zero rows
        w = g * dot / (den * den)
        if a.grad is not None:
            na_safe = np.where(na > 0.0, na, 1.0)
            a.grad -= ((w * nb[None, :]).sum(axis=1) / na_safe)[:, None] * av
        if b.grad is not None:
            nb_safe = np.where(nb > 0.0, nb, 1.0)
            b.grad -= ((w * na[:, None]).sum(axis=0) / nb_safe)[:, None] * bv

    return _finish(out, (a, b), bwd, "cosine_rows")


def smooth_l1(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Huber-style smooth L1, averaged over all elements.

    The target side is treated as a constant; gradients flow into pred only.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    _same_shape(pred, target, "smooth_l1")
    if delta <= 0.0:
        raise ValueError(f"smooth_l1: delta must be positive, got {delta}")
    d = pred.values - target.values
    small = np.abs(d) < delta
    elems = np.where(small, 0.5 * d * d / delta, np.abs(d) - 0.5 * delta)
    out = np.asarray(elems.mean())
    numel = d.size

    def bwd(g):
        if pred.grad is not None:
            pred.grad += np.where(small, d / delta, np.sign(d)) * (g / numel)

    return _finish(out, (pred,), bwd, "smooth_l1")


def _pool_windows(length: int, out_len: int) -> list[tuple[int, int]]:
    return [
        ((i * length) // out_len, ((i + 1) * length + out_len - 1) // out_len)
        for i in range(out_len)
    ]


def adaptive_avg_pool(x: Tensor, out_sizes: Sequence[int]) -> Tensor:
    """Mean-pool to a target size: 1-D over rows of [N x D], 2-D over [H x W x C].

    Window i covers [floor(i*L/O), ceil((i+1)*L/O)) along each pooled axis.
    """
    x = _as_tensor(x)
    sizes = [int(s) for s in out_sizes]
    if x.values.ndim == 2 and len(sizes) == 1:
        return _pool_1d(x, sizes[0])
    if x.values.ndim == 3 and len(sizes) == 2:
        return _pool_2d(x, sizes[0], sizes[1])
    raise ValueError(
        f"adaptive_avg_pool: expected [N x D] with one size or [H x W x C] "
        f"with two, got shape {x.shape} and sizes {sizes}"
    )


def _pool_1d(x: Tensor, out_len: int) -> Tensor:
    n = x.values.shape[0]
    if not 1 <= out_len <= n:
        raise ValueError(f"adaptive_avg_pool: output length {out_len} invalid for {n} rows")
    windows = _pool_windows(n, out_len)
    out = np.stack([x.values[lo:hi].mean(axis=0) for lo, hi in windows])

    def bwd(g):
        if x.grad is not None:
            for i, (lo, hi) in enumerate(windows):
                x.grad[lo:hi] += g[i] / (hi - lo)

    return _finish(out, (x,), bwd, "adaptive_avg_pool")


def _pool_2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.values.shape[:2]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ValueError(
            f"adaptive_avg_pool: output grid ({out_h}, {out_w}) invalid for input ({h}, {w})"
        )
    rows = _pool_windows(h, out_h)
    cols = _pool_windows(w, out_w)
    out = np.empty((out_h, out_w, x.values.shape[2]))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = x.values[r0:r1, c0:c1].mean(axis=(0, 1))

    def bwd(g):
        if x.grad is not None:
            for i, (r0, r1) in enumerate(rows):
                for j, (c0, c1) in enumerate(cols):
                    x.grad[r0:r1, c0:c1] += g[i, j] / ((r1 - r0) * (c1 - c0))

    return _finish(out, (x,), bwd, "adaptive_avg_pool")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.values.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm: last axis must have at least 2 entries, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must both be ({d},)"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    with np.errstate(all="ignore"):
        out = xhat * gain.values + bias.values

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        if gain.grad is not None:
            gain.grad += (g * xhat).sum(axis=lead)
        if bias.grad is not None:
            bias.grad += g.sum(axis=lead)
        if x.grad is not None:
            dxhat = g * gain.values
            x.grad += inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )

    return _finish(out, (x, gain, bias), bwd, "layer_norm")


def finite_diff_check(f, x: Tensor, h: float = 1e-5, coords=None) -> float:
    """Max relative error between taped and central-difference gradients of f.

    f must map one tensor to a scalar Tensor and be deterministic. coords
    optionally restricts the sweep to a subset of flat indices.
    """
    base = Tensor(np.array(x.values, dtype=np.float64, copy=True), requires_grad=True)
    with Tape():
        out = f(base)
    if not isinstance(out, Tensor) or out.values.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar Tensor")
    backward(out)
    analytic = base.grad.reshape(-1).copy()
    flat = base.values.reshape(-1)
    indices = range(flat.size) if coords is None else list(coords)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(Tensor(base.values)).item()
        flat[i] = orig - h
        f_minus = f(Tensor(base.values)).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
