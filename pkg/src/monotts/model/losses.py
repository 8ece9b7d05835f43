"""Training objective: pre-net L1, delayed post-net L1 and the attentive
stop loss ``|mu_T - (J + 1)|``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor_core as tc
from ..errors import ConfigError, ContractError, DimensionError
from ..tensor_core import Tensor


def attentive_stop_loss(mu_last, J) -> Tensor:
    """Mean over the batch of ``|mu_T - (J + 1)|``.

    ``mu_last`` is the attention position after the final decode step,
    shape ``(B, 1)``; ``J`` is an int or per-utterance array of lengths.
    """
    if isinstance(mu_last, Tensor):
        mu = mu_last
    else:
        mu = tc.constant(np.atleast_2d(np.asarray(mu_last, dtype=np.float64)))
    if mu.size == 0:
        raise ContractError("attentive stop loss needs at least one decode step")
    if mu.data.ndim == 1:
        mu = tc.reshape(mu, (-1, 1))
    target = np.broadcast_to(np.asarray(J, dtype=mu.dtype).reshape(-1, 1) + 1.0, mu.shape)
    return tc.mean(tc.abs(mu - tc.constant(np.array(target))))


def trace_stop_loss(trace, J: int | None = None) -> float:
    """Stop loss of a finished :class:`DecodeTrace`."""
    if trace.steps == 0:
        raise ContractError("empty decode trace")
    return abs(float(trace.mu[-1]) - ((trace.J if J is None else J) + 1))


@dataclass
class LossParts:
    total: Tensor
    l1_pre: float
    l1_post: float
    stop: float


def total_loss(y_ref, y_pre: Tensor, y_post: Tensor, mu_last, J, delay: int, stop_lambda: float) -> LossParts:
    """Composite objective over ``(B, T, mel)`` tensors.

    Both L1 terms average over frames and mel bins; the post-net term
    compares ``y_post[i + d]`` with ``y_ref[i]`` for ``i < T - d``.
    """
    y_ref = y_ref if isinstance(y_ref, Tensor) else tc.constant(np.asarray(y_ref, dtype=y_pre.dtype))
    if y_ref.data.ndim == 2:
        y_ref = tc.reshape(y_ref, (1,) + y_ref.shape)
    if y_pre.shape != y_ref.shape or y_post.shape != y_ref.shape:
        raise DimensionError(f"loss: y_ref {y_ref.shape}, y_pre {y_pre.shape}, y_post {y_post.shape} must agree")
    T = y_ref.shape[1]
    if delay < 0 or stop_lambda < 0:
        raise ConfigError("delay and stop_lambda must be non-negative")
    if T <= delay:
        raise ConfigError(f"sequence of {T} frames is not longer than the post-net delay {delay}")
    l1_pre = tc.l1_loss(y_pre, y_ref)
    post = y_post if delay == 0 else y_post[:, delay:]
    ref = y_ref if delay == 0 else y_ref[:, :T - delay]
    l1_post = tc.l1_loss(post, ref)
    stop = attentive_stop_loss(mu_last, J)
    total = l1_pre + l1_post
    if stop_lambda:
        total = total + stop * stop_lambda
    return LossParts(total, l1_pre.item(), l1_post.item(), stop.item())
