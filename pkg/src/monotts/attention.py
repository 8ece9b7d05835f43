"""Location-based attention: single-Gaussian monotonic attention and the
GMMv2b mixture baseline, plus context-vector pooling and alignment export.

Encoder positions are 1-based (``j = 1..J``); arrays stay 0-based and the
shift happens inside the alignment kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor_core import Tensor

GAUSSIAN = "gaussian"
GMMV2B = "gmmv2b"
MECHANISMS = (GAUSSIAN, GMMV2B)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def inverse_softplus(y: float) -> float:
    """The ``x`` with ``softplus(x) == y``; used to pick initial biases."""
    if y <= 0:
        raise ConfigError(f"softplus target must be positive, got {y}")
    return math.log(math.expm1(y))


def _positions(J: int, dtype) -> np.ndarray:
    return np.arange(1, J + 1, dtype=dtype)


def gaussian_weights(mu, sigma, J: int) -> np.ndarray:
    """Plain-numpy Gaussian alignment ``exp(-(j - mu)^2 / (2 sigma^2))``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    pos = _positions(J, np.float64)
    return np.exp(-((pos - mu[..., None]) ** 2) / (2.0 * sigma[..., None] ** 2))


def gaussian_alignment(mu: Tensor, sigma: Tensor, J: int) -> Tensor:
    """Alignment weights for positions ``1..J``.

    ``mu`` and ``sigma`` have shape ``(B, 1)`` (or ``(1,)``); the result is
    ``(B, J)`` (or ``(J,)``). The peak value is 1 at ``j == mu``; the weights
    are not renormalised over ``j``.
    """
    if J < 1:
        raise ContractError(f"encoder length must be >= 1, got {J}")
    if mu.shape != sigma.shape or mu.shape[-1] != 1:
        raise DimensionError(f"gaussian_alignment: mu {mu.shape} and sigma {sigma.shape} must be (..., 1)")
    pos = _positions(J, mu.dtype)
    diff = pos - mu.data
    inv_var = 1.0 / (sigma.data * sigma.data)
    alpha = np.exp(-0.5 * diff * diff * inv_var)

    def backward(g):
        ga = g * alpha
        gmu = (ga * diff * inv_var).sum(axis=-1, keepdims=True)
        gsig = (ga * diff * diff).sum(axis=-1, keepdims=True) * inv_var / sigma.data
        return gmu, gsig

    return tc.tensor.make_op("gaussian_alignment", alpha, (mu, sigma), backward)


def gmm_weights(omega, mu, sigma, J: int) -> np.ndarray:
    """Plain-numpy mixture alignment with per-component normaliser ``Z_k``."""
    omega, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (omega, mu, sigma))
    pos = _positions(J, np.float64)
    z = np.sqrt(2.0 * np.pi * sigma**2)
    comp = omega[..., None] / z[..., None] * np.exp(-((pos - mu[..., None]) ** 2) / (2.0 * sigma[..., None] ** 2))
    return comp.sum(axis=-2)


def gmm_alignment(omega: Tensor, mu: Tensor, sigma: Tensor, J: int) -> Tensor:
    """Mixture alignment ``sum_k omega_k / Z_k * exp(-(j - mu_k)^2 / (2 sigma_k^2))``.

    Inputs are ``(B, K)``; output ``(B, J)``.
    """
    if J < 1:
        raise ContractError(f"encoder length must be >= 1, got {J}")
    if not omega.shape == mu.shape == sigma.shape:
        raise DimensionError(f"gmm_alignment: omega {omega.shape}, mu {mu.shape}, sigma {sigma.shape} differ")
    pos = _positions(J, mu.dtype)
    diff = pos - mu.data[..., None]  # (B, K, J)
    s = sigma.data[..., None]
    phi = np.exp(-0.5 * diff * diff / (s * s)) / (_SQRT_2PI * s)
    alpha = (omega.data[..., None] * phi).sum(axis=-2)

    def backward(g):
        g = g[..., None, :]
        gphi = g * phi
        g_omega = gphi.sum(axis=-1)
        w = omega.data[..., None] * gphi
        g_mu = (w * diff).sum(axis=-1) / (sigma.data**2)
        g_sigma = (w * (diff * diff / (s * s) - 1.0)).sum(axis=-1) / sigma.data
        return g_omega, g_mu, g_sigma

    return tc.tensor.make_op("gmm_alignment", alpha, (omega, mu, sigma), backward)


def context_vector(alignment, encoder_outputs: Tensor) -> Tensor:
    """Weighted sum ``c = sum_j alpha_j h_j``.

    Accepts ``(J,)`` with ``(J, D)`` or batched ``(B, J)`` with ``(B, J, D)``.
    """
    alpha = alignment.weights if isinstance(alignment, AlignmentVector) else alignment
    a, h = alpha.data, encoder_outputs.data
    if a.ndim + 1 != h.ndim or a.shape != h.shape[:-1]:
        raise DimensionError(f"context_vector: alignment {a.shape} does not match encoder outputs {h.shape}")
    if a.ndim == 1:
        out = a @ h

        def backward(g):
            return h @ g, np.outer(a, g)
    else:
        out = np.einsum("bj,bjd->bd", a, h)

        def backward(g):
            return np.einsum("bd,bjd->bj", g, h), a[:, :, None] * g[:, None, :]

    return tc.tensor.make_op("context_vector", out, (alpha, encoder_outputs), backward)


@dataclass
class AlignmentVector:
    weights: Tensor
    mechanism: str
    step: int


@dataclass
class GaussianAttentionState:
    mu: Tensor
    sigma: Tensor | None = None
    delta: Tensor | None = None
    step: int = 0

    def position(self) -> Tensor:
        return self.mu


@dataclass
class GMMAttentionState:
    mu: Tensor
    sigma: Tensor | None = None
    delta: Tensor | None = None
    omega: Tensor | None = None
    step: int = 0

    @property
    def K(self) -> int:
        return self.mu.shape[-1]

    @property
    def Z(self) -> np.ndarray | None:
        if self.sigma is None:
            return None
        return np.sqrt(2.0 * np.pi * self.sigma.data**2)

    def position(self) -> Tensor:
        """Mixture-weighted mean ``sum_k omega_k mu_k``, shape ``(B, 1)``."""
        if self.omega is None:
            return tc.reshape(self.mu[:, 0], (-1, 1))
        return tc.sum(self.omega * self.mu, axis=-1, keepdims=True)


def _check_query(query: Tensor) -> None:
    if not np.isfinite(query.data).all():
        raise NumericError("attention query contains non-finite values")


class GaussianAttention:
    """Single Gaussian window whose mean only moves forward.

    An affine layer maps the query to ``(delta_hat, sigma_hat)``; softplus
    turns them into a positive step and width.
    """

    mechanism = GAUSSIAN

    def __init__(self, query_dim: int, rng: np.random.Generator, dtype=np.float32, mu0: float = 0.0):
        scale = 1.0 / math.sqrt(query_dim)
        self.weight = tc.parameter(rng.uniform(-scale, scale, size=(2, query_dim)), name="attention.weight", dtype=dtype)
        self.bias = tc.parameter(np.zeros(2), name="attention.bias", dtype=dtype)
        self.mu0 = mu0

    def parameters(self) -> dict[str, Tensor]:
        return {"attention.weight": self.weight, "attention.bias": self.bias}

    def initial_state(self, batch: int = 1) -> GaussianAttentionState:
        return GaussianAttentionState(mu=tc.constant(np.full((batch, 1), self.mu0), dtype=self.weight.dtype))

    def attend(self, state: GaussianAttentionState, query: Tensor, J: int):
        if J < 1:
            raise ContractError(f"encoder length must be >= 1, got {J}")
        _check_query(query)
        raw = tc.linear(query, self.weight, self.bias)
        return self.attend_raw(state, raw, J)

    def attend_raw(self, state: GaussianAttentionState, raw: Tensor, J: int):
        """Advance from projected intermediates ``raw = [delta_hat, sigma_hat]``."""
        delta = tc.softplus(raw[:, 0:1])
        sigma = tc.softplus(raw[:, 1:2])
        mu = state.mu + delta
        alpha = gaussian_alignment(mu, sigma, J)
        new = GaussianAttentionState(mu=mu, sigma=sigma, delta=delta, step=state.step + 1)
        return AlignmentVector(alpha, GAUSSIAN, new.step), new


class GMMv2bAttention:
    """Mixture of ``K`` Gaussians with softmax weights and softplus
    step/width, each offset by a fixed initial bias."""

    mechanism = GMMV2B

    def __init__(
        self,
        query_dim: int,
        K: int,
        rng: np.random.Generator,
        dtype=np.float32,
        delta_init: float = 1.0,
        sigma_init: float = 10.0,
        mu0: float = 0.0,
    ):
        if K < 1:
            raise ConfigError(f"GMM attention needs K >= 1, got {K}")
        scale = 1.0 / math.sqrt(query_dim)
        self.K = K
        self.weight = tc.parameter(rng.uniform(-scale, scale, size=(3 * K, query_dim)), name="attention.weight", dtype=dtype)
        self.bias = tc.parameter(np.zeros(3 * K), name="attention.bias", dtype=dtype)
        self.delta_bias = inverse_softplus(delta_init)
        self.sigma_bias = inverse_softplus(sigma_init)
        self.mu0 = mu0

    def parameters(self) -> dict[str, Tensor]:
        return {"attention.weight": self.weight, "attention.bias": self.bias}

    def initial_state(self, batch: int = 1) -> GMMAttentionState:
        return GMMAttentionState(mu=tc.constant(np.full((batch, self.K), self.mu0), dtype=self.weight.dtype))

    def attend(self, state: GMMAttentionState, query: Tensor, J: int):
        if J < 1:
            raise ContractError(f"encoder length must be >= 1, got {J}")
        _check_query(query)
        raw = tc.linear(query, self.weight, self.bias)
        return self.attend_raw(state, raw, J)

    def attend_raw(self, state: GMMAttentionState, raw: Tensor, J: int):
        K = self.K
        omega = tc.softmax(raw[:, :K], axis=-1)
        delta = tc.softplus(raw[:, K:2 * K] + self.delta_bias)
        sigma = tc.softplus(raw[:, 2 * K:] + self.sigma_bias)
        mu = state.mu + delta
        alpha = gmm_alignment(omega, mu, sigma, J)
        new = GMMAttentionState(mu=mu, sigma=sigma, delta=delta, omega=omega, step=state.step + 1)
        return AlignmentVector(alpha, GMMV2B, new.step), new


def build_attention(mechanism: str, query_dim: int, rng: np.random.Generator, dtype=np.float32, K: int = 5,
                    delta_init: float = 1.0, sigma_init: float = 10.0, mu0: float = 0.0):
    if mechanism == GAUSSIAN:
        return GaussianAttention(query_dim, rng, dtype=dtype, mu0=mu0)
    if mechanism == GMMV2B:
        return GMMv2bAttention(query_dim, K, rng, dtype=dtype, delta_init=delta_init, sigma_init=sigma_init, mu0=mu0)
    raise ConfigError(f"unknown attention mechanism {mechanism!r}; expected one of {MECHANISMS}")


def initial_state(mechanism: str, batch: int = 1, K: int = 5, mu0: float = 0.0, dtype=np.float32):
    """Decode-step-zero state for either mechanism."""
    if mechanism == GAUSSIAN:
        return GaussianAttentionState(mu=tc.constant(np.full((batch, 1), mu0), dtype=dtype))
    if mechanism == GMMV2B:
        if K < 1:
            raise ConfigError(f"GMM attention needs K >= 1, got {K}")
        return GMMAttentionState(mu=tc.constant(np.full((batch, K), mu0), dtype=dtype))
    raise ConfigError(f"unknown attention mechanism {mechanism!r}")


# --- export -----------------------------------------------------------------

def write_alignment_csv(alignment: np.ndarray, path: str | Path) -> None:
    """One row per decode step, one column per phoneme index."""
    alignment = np.asarray(alignment, dtype=np.float64)
    if alignment.ndim != 2:
        raise DimensionError(f"alignment matrix must be 2-D, got {alignment.shape}")
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(f"j{j}" for j in range(1, alignment.shape[1] + 1)) + "\n")
        for row in alignment:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


def read_alignment_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_alignment_pgm(alignment: np.ndarray, path: str | Path) -> None:
    """Binary 8-bit greyscale image, same orientation as the CSV.

    Values are scaled by ``max(1, max(alignment))`` so Gaussian weights map
    1.0 to white.
    """
    alignment = np.asarray(alignment, dtype=np.float64)
    if alignment.ndim != 2:
        raise DimensionError(f"alignment matrix must be 2-D, got {alignment.shape}")
    scale = max(1.0, float(alignment.max(initial=0.0)))
    pixels = np.clip(np.rint(255.0 * alignment / scale), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)
