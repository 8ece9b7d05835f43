"""Tensor value type and the flat gradient tape."""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_ids = itertools.count()
_tape_stack: list["GradTape"] = []


def get_default_dtype():
    return _default_dtype


def set_default_dtype(name: str) -> None:
    global _default_dtype
    try:
        _default_dtype = _DTYPES[name]
    except KeyError:
        raise ContractError(f"unknown precision {name!r}; use float32 or float64") from None


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = old


def resolve_dtype(name: str):
    try:
        return _DTYPES[name]
    except KeyError:
        raise ContractError(f"unknown precision {name!r}; use float32 or float64") from None


class Tensor:
    """Immutable dense array with an identity used by :class:`GradTape`.

    ``data`` must not be mutated in place once the tensor has been consumed
    by a recorded operation.
    """

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if not isinstance(data, (np.ndarray, np.generic)) or arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=dtype or _default_dtype), requires_grad=True, name=name)


def constant(data, dtype=None) -> Tensor:
    """Non-trainable tensor; float arrays keep their dtype unless ``dtype`` is given."""
    return Tensor(data, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


BackwardFn = Callable[[list], Sequence]


class GradTape:
    """Flat, ordered record of differentiable operations.

    Usage::

        tape = GradTape()
        with tape:
            loss = f(params)
        grads = tape.gradient(loss, params)

    Recording order is a topological order, so replaying it backwards
    guarantees every value's gradient is complete before it is read.
    """

    def __init__(self):
        self.records: list[tuple[tuple[int, ...], tuple[Tensor, ...], BackwardFn, tuple]] = []
        self._closed = False

    def __enter__(self):
        if self._closed:
            raise ContractError("a GradTape records exactly one forward pass")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        self._closed = True
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, outputs: Sequence[Tensor], inputs: Sequence[Tensor], backward: BackwardFn) -> None:
        shapes = tuple((o.shape, o.dtype) for o in outputs)
        self.records.append((tuple(o.id for o in outputs), tuple(inputs), backward, shapes))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient map keyed by tensor id for every value reached from ``loss``."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for out_ids, inputs, fn, shapes in reversed(self.records):
            gouts = [grads.pop(i, None) for i in out_ids]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros(s, dtype=dt) if g is None else g for g, (s, dt) in zip(gouts, shapes)]
            gins = fn(gouts)
            for inp, g in zip(inputs, gins):
                if g is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = g if prev is None else prev + g
        return grads

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(loss)
        return [grads.get(s.id, np.zeros_like(s.data)) for s in sources]


def active_tape() -> GradTape | None:
    return _tape_stack[-1] if _tape_stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def make_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result and record it when any input needs a gradient.

    ``backward(g)`` maps the output gradient to a tuple with one entry (or
    ``None``) per input.
    """
    _check_finite(out, op)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record((result,), inputs, lambda gs: backward(gs[0]))
    return result


def make_multi_op(op: str, outs: Sequence[np.ndarray], inputs: Sequence[Tensor], backward: Callable) -> tuple[Tensor, ...]:
    """Like :func:`make_op` for kernels with several outputs.

    ``backward`` receives a list of output gradients; absent ones arrive as
    zeros.
    """
    for o in outs:
        _check_finite(o, op)
    needs = any(t.requires_grad for t in inputs)
    results = tuple(Tensor(o, requires_grad=needs) for o in outs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(results, inputs, backward)
    return results
