"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    tape = GradTape()
    with tape:
        loss = loss_fn()
    return tape.gradient(loss, params)


_STENCILS = {
    2: ((1.0, 0.5),),
    4: ((1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0)),
}


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``param``.

    ``order`` 4 uses the five-point stencil, which tolerates a larger ``h``
    and so keeps round-off out of tiny gradient entries.
    ``param.data`` is perturbed in place and restored afterwards.
    """
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}, got {order}")
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for k in range(flat.size):
        orig = flat[k]
        acc = 0.0
        for m, coef in _STENCILS[order]:
            flat[k] = orig + m * h
            up = loss_fn().item()
            flat[k] = orig - m * h
            down = loss_fn().item()
            acc += coef * (up - down)
        flat[k] = orig
        grad[k] = acc / h
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    names: Sequence[str] | None = None,
    order: int = 2,
) -> dict[str, float]:
    """Max relative error per parameter; run at float64 for meaningful results."""
    analytic = analytic_gradients(loss_fn, params)
    names = names or [p.name or f"param{i}" for i, p in enumerate(params)]
    return {
        name: relative_error(g, numerical_gradient(loss_fn, p, h, order))
        for name, p, g in zip(names, params, analytic)
    }
