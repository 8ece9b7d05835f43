"""Differentiable primitives.

Broadcasting is limited to scalar-with-tensor and a 1-D bias row added
along the last axis; anything else is a :class:`DimensionError`.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np

from ..errors import DimensionError, InputError
from .tensor import Tensor, as_tensor, make_multi_op, make_op


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.data.ndim <= max(a.data.ndim, 1):
        return "b_scalar"
    if a.size == 1 and a.data.ndim <= max(b.data.ndim, 1):
        return "a_scalar"
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "b_row"
    if a.data.ndim == 1 and b.data.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return "a_row"
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, target: Tensor, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(target.shape)
    if kind == f"{side}_row":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind(a, b, "add")
    return make_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_reduce_to(g, a, kind, "a"), _reduce_to(g, b, kind, "b")),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind(a, b, "sub")
    return make_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_reduce_to(g, a, kind, "a"), _reduce_to(-g, b, kind, "b")),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    kind = _broadcast_kind(a, b, "mul")
    return make_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (_reduce_to(g * b.data, a, kind, "a"), _reduce_to(g * a.data, b, kind, "b")),
    )


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``M x K`` and ``K x N`` (or a length-``K`` vector)."""
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return make_op("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(..., in)``."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("linear", out, inputs, backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus_np(x: np.ndarray) -> np.ndarray:
    # logaddexp is overflow-safe; the floor keeps the result strictly positive
    # where exp(x) underflows.
    out = np.logaddexp(np.zeros((), dtype=x.dtype), x)
    return np.maximum(out, np.finfo(out.dtype).smallest_subnormal)


def softplus(a: Tensor) -> Tensor:
    """Elementwise ``ln(1 + e^x)``; always strictly positive."""
    out = softplus_np(a.data)
    return make_op("softplus", out, (a,), lambda g: (g * _sigmoid(a.data),))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < max(a.data.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    out = softmax_np(a.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (a,), backward)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    # sign(0) == 0 gives the zero subgradient at the kink.
    return make_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return make_op("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.dtype)
        return make_op("sum", out, (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)
    return make_op("mean", out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element."""
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype)

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return make_op("l1_loss", out, (pred, target), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {[t.shape for t in tensors]}: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op("stack", out, tensors, backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, builtins.slice)) or i is Ellipsis or i is None for i in items)


def slice(a: Tensor, index) -> Tensor:  # noqa: A001
    out = np.array(a.data[index])
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op("slice", out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids of any integer shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise InputError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"embedding id out of range [0, {vocab}): min={ids.min()} max={ids.max()}")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_op("embedding", out, (table,), backward)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# --- recurrent kernels -------------------------------------------------------

def lstm_gates(z: np.ndarray, c_prev: np.ndarray):
    """Apply LSTM nonlinearities to pre-activations ``z`` laid out [i, f, g, o]."""
    H = c_prev.shape[-1]
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    gg = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * gg
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, gg, o, tc)


def _lstm_gates_backward(gh, gc, c_prev, cache):
    i, f, gg, o, tc = cache
    go = gh * tc
    dc = gc + gh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * gg * i * (1.0 - i), dc * c_prev * f * (1.0 - f), dc * i * (1.0 - gg * gg), go * o * (1.0 - o)],
        axis=-1,
    )
    return dz, dc * f


def _check_lstm(x, h, c, weight, bias):
    H = h.shape[-1]
    if weight.shape != (4 * H, x.shape[-1] + H) or bias.shape != (4 * H,) or c.shape != h.shape:
        raise DimensionError(
            f"lstm: x {x.shape}, h {h.shape}, c {c.shape}, weight {weight.shape}, bias {bias.shape} inconsistent"
        )


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step with kernel ``weight`` of shape ``(4H, I + H)``.

    Gate rows are stacked as [input, forget, cell, output]; the kernel acts
    on the concatenation ``[x, h]``.
    """
    _check_lstm(x, h, c, weight, bias)
    I = x.shape[-1]
    xh = np.concatenate([x.data, h.data], axis=-1)
    z = xh @ weight.data.T + bias.data
    h_new, c_new, cache = lstm_gates(z, c.data)

    def backward(gs):
        dz, dc_prev = _lstm_gates_backward(gs[0], gs[1], c.data, cache)
        dxh = dz @ weight.data
        return dxh[..., :I], dxh[..., I:], dc_prev, dz.T @ xh, dz.sum(axis=0)

    return make_multi_op("lstm_cell", (h_new, c_new), (x, h, c, weight, bias), backward)


def lstm_sequence(xs: Tensor, weight: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM from a zero state over ``xs`` of shape ``(B, T, I)``.

    Returns the hidden sequence ``(B, T, H)`` in input time order.  With
    ``reverse`` the recurrence runs from the last frame to the first.
    """
    B, T, I = xs.shape
    H = weight.shape[0] // 4
    dt = xs.dtype
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    _check_lstm(xs.data[:, 0], h, c, weight, bias)
    order = range(T - 1, -1, -1) if reverse else range(T)
    out = np.empty((B, T, H), dtype=dt)
    caches = []
    for t in order:
        xh = np.concatenate([xs.data[:, t], h], axis=-1)
        z = xh @ weight.data.T + bias.data
        c_prev = c
        h, c, cache = lstm_gates(z, c_prev)
        out[:, t] = h
        caches.append((t, xh, c_prev, cache))

    def backward(g):
        gx = np.zeros_like(xs.data)
        gw = np.zeros_like(weight.data)
        gb = np.zeros_like(bias.data)
        gh_next = np.zeros((B, H), dtype=dt)
        gc_next = np.zeros((B, H), dtype=dt)
        for t, xh, c_prev, cache in reversed(caches):
            dz, gc_next = _lstm_gates_backward(g[:, t] + gh_next, gc_next, c_prev, cache)
            dxh = dz @ weight.data
            gx[:, t] = dxh[:, :I]
            gh_next = dxh[:, I:]
            gw += dz.T @ xh
            gb += dz.sum(axis=0)
        return gx, gw, gb

    return make_op("lstm_sequence", out, (xs, weight, bias), backward)
