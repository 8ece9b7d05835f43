"""Gradual block-magnitude pruning, block-sparse kernels and op accounting.

An LSTM kernel here is the stacked matrix of shape ``(4H, I + H)`` acting on
``[x, h]`` (gate rows ordered input, forget, cell, output), so one pruning
decision covers both input-to-hidden and hidden-to-hidden weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numba
import numpy as np

from .errors import ConfigError, ContractError, DimensionError

CURVES = ("cubic", "linear")


@dataclass(frozen=True)
class PruneSchedule:
    """When and how far to prune. Defaults are the full-scale schedule
    (start at 20k steps, prune every 500, reach 90% at 200k)."""

    start_step: int = 20_000
    interval: int = 500
    end_step: int = 200_000
    target_sparsity: float = 0.9
    block_rows: int = 16
    block_cols: int = 1
    curve: str = "cubic"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.start_step < self.end_step:
            raise ConfigError(f"need 0 <= start_step < end_step, got {self.start_step}, {self.end_step}")
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError(f"target_sparsity must be in [0, 1), got {self.target_sparsity}")
        if self.block_rows < 1 or self.block_cols < 1:
            raise ConfigError(f"block shape must be positive, got {self.block_rows}x{self.block_cols}")
        if self.curve not in CURVES:
            raise ConfigError(f"curve must be one of {CURVES}, got {self.curve!r}")

    @classmethod
    def scaled(cls, factor: int = 10, **overrides) -> "PruneSchedule":
        """The default schedule with every step count divided by ``factor``."""
        base = cls()
        fields = dict(
            start_step=base.start_step // factor,
            interval=max(1, base.interval // factor),
            end_step=base.end_step // factor,
        )
        fields.update(overrides)
        return cls(**{**asdict(base), **fields})

    @property
    def block_shape(self) -> tuple[int, int]:
        return (self.block_rows, self.block_cols)

    def is_event(self, step: int) -> bool:
        """True at the steps where masks are recomputed."""
        if step < self.start_step or step > self.end_step:
            return False
        return step == self.end_step or (step - self.start_step) % self.interval == 0

    def sparsity_at(self, step: int) -> float:
        return sparsity_at(self, step)


def sparsity_at(schedule: PruneSchedule, step: int) -> float:
    """Target sparsity in force at ``step``.

    Zero before the start, the final target from ``end_step`` on, and in
    between the interpolation curve evaluated at the most recent pruning
    event.
    """
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    t0, t1, S = schedule.start_step, schedule.end_step, schedule.target_sparsity
    if step < t0:
        return 0.0
    if step >= t1:
        return S
    tq = t0 + ((step - t0) // schedule.interval) * schedule.interval
    frac = (tq - t0) / (t1 - t0)
    if schedule.curve == "linear":
        return S * frac
    return S * (1.0 - (1.0 - frac) ** 3)


def blocks_for_fraction(fraction: float, n_blocks: int) -> int:
    """``ceil(fraction * n_blocks)``, ignoring float noise below 1e-9."""
    return int(math.ceil(round(fraction * n_blocks, 9)))


# --- numba kernels -------------------------------------------------------------

@numba.njit(cache=True)
def _bsr_matvec(row_ptr, col_idx, values, v, out):
    bh = values.shape[1]
    bw = values.shape[2]
    macs = 0
    for R in range(row_ptr.shape[0] - 1):
        r0 = R * bh
        for p in range(row_ptr[R], row_ptr[R + 1]):
            c0 = col_idx[p] * bw
            for a in range(bh):
                for b in range(bw):
                    out[r0 + a] += values[p, a, b] * v[c0 + b]
            macs += bh * bw
    return macs


@numba.njit(cache=True)
def _bsr_matvec_col1(row_ptr, col_idx, values, v, out):
    # bw == 1 fast path; accumulation order identical to _bsr_matvec.
    bh = values.shape[1]
    macs = 0
    for R in range(row_ptr.shape[0] - 1):
        r0 = R * bh
        for p in range(row_ptr[R], row_ptr[R + 1]):
            vc = v[col_idx[p]]
            for a in range(bh):
                out[r0 + a] += values[p, a, 0] * vc
        macs += (row_ptr[R + 1] - row_ptr[R]) * bh
    return macs


@numba.njit(cache=True)
def _ordered_dense_matvec(w, v, out):
    for r in range(w.shape[0]):
        for c in range(w.shape[1]):
            out[r] += w[r, c] * v[c]
    return w.shape[0] * w.shape[1]


@numba.njit(cache=True)
def _dense_matvec_by_columns(w_t, v, out):
    # Column sweep over w.T; each out[r] still sums c = 0, 1, ... in order.
    for c in range(w_t.shape[0]):
        vc = v[c]
        for r in range(w_t.shape[1]):
            out[r] += w_t[c, r] * vc
    return w_t.shape[0] * w_t.shape[1]


def dense_matvec_by_columns(w_t: np.ndarray, v: np.ndarray, out: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """``w @ v`` from the transposed weight ``w_t`` (C-contiguous ``(cols, rows)``).

    Bit-identical to :func:`ordered_dense_matvec`, but the inner loop runs
    down a column like the 16x1 block kernel.
    """
    w_t = np.ascontiguousarray(w_t)
    if out is None:
        out = np.zeros(w_t.shape[1], dtype=w_t.dtype)
    macs = _dense_matvec_by_columns(w_t, np.ascontiguousarray(v, dtype=w_t.dtype), out)
    return out, int(macs)


def ordered_dense_matvec(w: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, int]:
    """Dense reference product summing each row left to right.

    Returns the result and the number of multiplies executed.
    """
    w = np.ascontiguousarray(w)
    out = np.zeros(w.shape[0], dtype=w.dtype)
    macs = _ordered_dense_matvec(w, np.ascontiguousarray(v, dtype=w.dtype), out)
    return out, int(macs)


class OpCounter:
    """Accumulates multiplies executed by the instrumented kernels."""

    def __init__(self):
        self.multiplies = 0

    def add(self, n: int) -> None:
        self.multiplies += int(n)


class BlockSparseMatrix:
    """Block-compressed matrix; blocks stored block-row-major.

    Immutable after construction: ``values`` and the index arrays are marked
    read-only.
    """

    def __init__(self, shape, block_shape, block_mask: np.ndarray, values: np.ndarray):
        rows, cols = shape
        bh, bw = block_shape
        if rows % bh or cols % bw:
            raise ConfigError(f"matrix {rows}x{cols} is not divisible into {bh}x{bw} blocks")
        nbr, nbc = rows // bh, cols // bw
        block_mask = np.asarray(block_mask, dtype=bool)
        if block_mask.shape != (nbr, nbc):
            raise DimensionError(f"block mask {block_mask.shape} does not match {nbr}x{nbc} blocks")
        nnzb = int(block_mask.sum())
        values = np.ascontiguousarray(values)
        if values.shape != (nnzb, bh, bw):
            raise DimensionError(f"block values {values.shape} do not match {nnzb} blocks of {bh}x{bw}")
        self.shape = (rows, cols)
        self.block_shape = (bh, bw)
        self.block_mask = block_mask
        br, bc = np.nonzero(block_mask)  # row-major order
        self.col_idx = bc.astype(np.int64)
        self.row_ptr = np.concatenate([[0], np.cumsum(block_mask.sum(axis=1))]).astype(np.int64)
        self.values = values
        for arr in (self.block_mask, self.col_idx, self.row_ptr, self.values):
            arr.flags.writeable = False
        self._dense_t = None

    @classmethod
    def from_dense(cls, dense: np.ndarray, block_shape, block_mask: np.ndarray | None = None) -> "BlockSparseMatrix":
        dense = np.asarray(dense)
        rows, cols = dense.shape
        bh, bw = block_shape
        if rows % bh or cols % bw:
            raise ConfigError(f"matrix {rows}x{cols} is not divisible into {bh}x{bw} blocks")
        blocks = dense.reshape(rows // bh, bh, cols // bw, bw).transpose(0, 2, 1, 3)
        if block_mask is None:
            block_mask = np.ones(blocks.shape[:2], dtype=bool)
        return cls(dense.shape, block_shape, block_mask, blocks[np.asarray(block_mask, dtype=bool)].copy())

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def n_blocks(self) -> int:
        return self.block_mask.size

    @property
    def nnz(self) -> int:
        return self.values.size

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / (self.shape[0] * self.shape[1])

    def dense_mask(self) -> np.ndarray:
        """Elementwise 0/1 mask in the dense layout."""
        bh, bw = self.block_shape
        return np.kron(self.block_mask, np.ones((bh, bw), dtype=bool))

    def to_dense(self) -> np.ndarray:
        rows, cols = self.shape
        bh, bw = self.block_shape
        blocks = np.zeros((rows // bh, cols // bw, bh, bw), dtype=self.dtype)
        blocks[self.block_mask] = self.values
        return blocks.transpose(0, 2, 1, 3).reshape(rows, cols)

    def matvec(self, v: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
        return sparse_matvec(self, v, counter)

    def __repr__(self) -> str:
        return f"BlockSparseMatrix(shape={self.shape}, block={self.block_shape}, sparsity={self.sparsity:.4f})"


def sparse_matvec(m: BlockSparseMatrix, v: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """``m @ v`` touching stored blocks only; ``v`` is ``(cols,)`` or ``(B, cols)``."""
    v = np.asarray(v)
    if v.shape[-1] != m.shape[1] or v.ndim not in (1, 2):
        raise DimensionError(f"sparse_matvec: matrix {m.shape} cannot multiply vector {v.shape}")
    v = np.ascontiguousarray(v, dtype=m.dtype)
    if m.nnz == m.shape[0] * m.shape[1] and v.ndim == 1:
        # Nothing to skip: the column sweep sums in the same order, faster.
        if m._dense_t is None:
            m._dense_t = np.ascontiguousarray(m.to_dense().T)
            m._dense_t.flags.writeable = False
        out = np.zeros(m.shape[0], dtype=m.dtype)
        macs = _dense_matvec_by_columns(m._dense_t, v, out)
        if counter is not None:
            counter.add(macs)
        return out
    kernel = _bsr_matvec_col1 if m.block_shape[1] == 1 else _bsr_matvec
    if v.ndim == 1:
        out = np.zeros(m.shape[0], dtype=m.dtype)
        macs = kernel(m.row_ptr, m.col_idx, m.values, v, out)
    else:
        out = np.zeros((v.shape[0], m.shape[0]), dtype=m.dtype)
        macs = 0
        for b in range(v.shape[0]):
            macs += kernel(m.row_ptr, m.col_idx, m.values, v[b], out[b])
    if counter is not None:
        counter.add(macs)
    return out


def achieved_sparsity(block_mask: np.ndarray) -> float:
    """Fraction of pruned blocks given a keep-mask (True = kept)."""
    return 1.0 - float(np.count_nonzero(block_mask)) / block_mask.size


def block_scores(dense: np.ndarray, block_shape) -> np.ndarray:
    rows, cols = dense.shape
    bh, bw = block_shape
    if rows % bh or cols % bw:
        raise ConfigError(f"matrix {rows}x{cols} is not divisible into {bh}x{bw} blocks")
    return np.abs(dense).reshape(rows // bh, bh, cols // bw, bw).mean(axis=(1, 3))


def prune_mask(dense: np.ndarray, current_mask: np.ndarray | None, target_fraction: float, block_shape) -> np.ndarray:
    """New keep-mask with ``ceil(target * n_blocks)`` blocks pruned.

    Blocks already pruned stay pruned; the remainder is taken from the
    smallest mean-|w| blocks, ties broken by (block_row, block_col).
    """
    if not 0.0 <= target_fraction <= 1.0:
        raise ContractError(f"target fraction must be in [0, 1], got {target_fraction}")
    scores = block_scores(np.asarray(dense, dtype=np.float64), block_shape)
    nbr, nbc = scores.shape
    keep = np.ones((nbr, nbc), dtype=bool) if current_mask is None else np.array(current_mask, dtype=bool)
    if keep.shape != (nbr, nbc):
        raise DimensionError(f"current mask {keep.shape} does not match {nbr}x{nbc} blocks")
    n_blocks = nbr * nbc
    already = n_blocks - int(keep.sum())
    wanted = blocks_for_fraction(target_fraction, n_blocks)
    if wanted < already:
        raise ContractError(
            f"target sparsity {target_fraction} is below the current {already / n_blocks:.6f}; masks only grow"
        )
    extra = wanted - already
    if extra:
        br, bc = np.nonzero(keep)
        order = np.lexsort((bc, br, scores[br, bc]))[:extra]
        keep[br[order], bc[order]] = False
    return keep


def prune_to(matrix: np.ndarray, current_mask: np.ndarray | None, target_fraction: float, block_shape) -> BlockSparseMatrix:
    """Prune a dense weight to ``target_fraction`` block sparsity."""
    keep = prune_mask(matrix, current_mask, target_fraction, block_shape)
    return BlockSparseMatrix.from_dense(np.asarray(matrix), block_shape, keep)


# --- LSTM ----------------------------------------------------------------------

@dataclass(frozen=True)
class SparseLSTMWeights:
    kernel: BlockSparseMatrix  # (4H, I + H)
    bias: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.kernel.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.kernel.shape[1] - self.hidden


def fused_lstm_gates(z: np.ndarray, c_prev: np.ndarray):
    """Inference-only LSTM nonlinearities for ``z`` laid out [i, f, g, o]; returns ``(h, c)``.

    Sigmoid is evaluated as ``0.5 + 0.5 tanh(x / 2)``, which cannot overflow
    and keeps every transcendental on numpy's vectorised paths.
    """
    H = c_prev.shape[-1]
    s = np.tanh(z * 0.5)
    s *= 0.5
    s += 0.5
    g = np.tanh(z[..., 2 * H:3 * H])
    c = s[..., H:2 * H] * c_prev + s[..., :H] * g
    h = s[..., 3 * H:] * np.tanh(c)
    return h, c


def _check_step(rows, cols, x, h, c):
    H = rows // 4
    if rows != 4 * H or x.shape[-1] + h.shape[-1] != cols or h.shape[-1] != H or c.shape != h.shape:
        raise DimensionError(f"lstm step: kernel {(rows, cols)} vs x {x.shape}, h {h.shape}, c {c.shape}")


def sparse_lstm_step(weights: SparseLSTMWeights, x, h_prev, c_prev, counter: OpCounter | None = None):
    """LSTM cell whose kernel product runs through :func:`sparse_matvec`."""
    _check_step(*weights.kernel.shape, x, h_prev, c_prev)
    xh = np.concatenate([x, h_prev], axis=-1)
    z = sparse_matvec(weights.kernel, xh, counter) + weights.bias
    return fused_lstm_gates(z, c_prev)


def dense_lstm_step(kernel: np.ndarray, bias: np.ndarray, x, h_prev, c_prev, counter: OpCounter | None = None):
    """Dense LSTM cell using the ordered reference product (1-D inputs)."""
    _check_step(*kernel.shape, x, h_prev, c_prev)
    z, macs = ordered_dense_matvec(kernel, np.concatenate([x, h_prev]))
    if counter is not None:
        counter.add(macs)
    return fused_lstm_gates(z + bias, c_prev)


def count_ops(I: int, H: int, S: float) -> float:
    """Main multiply count of one LSTM step at sparsity ``S``: ``4 (1 - S) (I H + H^2)``."""
    if I < 1 or H < 1:
        raise ConfigError(f"dimensions must be >= 1, got I={I}, H={H}")
    if not 0.0 <= S <= 1.0:
        raise ConfigError(f"sparsity must be in [0, 1], got {S}")
    return 4.0 * (1.0 - S) * (I * H + H * H)


# --- training-time pruning -------------------------------------------------------

class Pruner:
    """Applies a :class:`PruneSchedule` to named dense kernels during training.

    Masks are persistent: a block, once pruned, never returns. Call
    :meth:`mask_gradients` before each update and :meth:`step` after it.
    """

    def __init__(self, schedule: PruneSchedule, shapes: dict[str, tuple[int, int]]):
        self.schedule = schedule
        self.masks: dict[str, np.ndarray] = {}
        for name, (rows, cols) in shapes.items():
            bh, bw = schedule.block_shape
            if rows % bh or cols % bw:
                raise ConfigError(f"{name}: {rows}x{cols} is not divisible into {bh}x{bw} blocks")
            self.masks[name] = np.ones((rows // bh, cols // bw), dtype=bool)
        self.events: list[dict] = []

    @property
    def names(self) -> Iterable[str]:
        return self.masks.keys()

    def dense_mask(self, name: str) -> np.ndarray:
        bh, bw = self.schedule.block_shape
        return np.kron(self.masks[name], np.ones((bh, bw), dtype=bool))

    def mask_gradients(self, grads: dict[str, np.ndarray]) -> None:
        for name in self.masks:
            if name in grads:
                grads[name] *= self.dense_mask(name)

    def apply(self, weights: dict[str, np.ndarray]) -> None:
        """Zero masked entries in place."""
        for name in self.masks:
            weights[name] *= self.dense_mask(name)

    def step(self, step: int, weights: dict[str, np.ndarray]) -> bool:
        """Run a pruning event if ``step`` is one; returns whether it ran."""
        if not self.schedule.is_event(step):
            return False
        target = self.schedule.sparsity_at(step)
        record = {"step": step, "target": target}
        for name in self.masks:
            new = prune_mask(weights[name], self.masks[name], target, self.schedule.block_shape)
            if np.any(new & ~self.masks[name]):
                raise AssertionError(f"{name}: pruning regrew blocks")
            self.masks[name] = new
            record[name] = achieved_sparsity(new)
        self.apply(weights)
        self.events.append(record)
        return True
