"""Sparse-vs-dense timing of the autoregressive decoder loop.

Timing uses :class:`LeanDecoder`, a tensor-free copy of the decoder step
(attention RNN, attention, decoder RNN, output head). The reference dense
kernel is a compiled column sweep, the same loop shape as the 16x1 block
kernel, so the comparison isolates skipped work; a BLAS dense time is
reported alongside. The encoder is run
once outside the timed region.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ..attention import GAUSSIAN
from ..errors import ConfigError
from ..sparsity import OpCounter, _dense_matvec_by_columns, count_ops, fused_lstm_gates, sparse_matvec
from ..tensor_core.ops import softmax_np, softplus_np

REPORT_FIELDS = (
    "hidden", "attention_input", "decoder_input", "sparsity", "block_shape", "frames", "steps",
    "dense_seconds", "sparse_seconds", "blas_seconds", "dense_fps", "sparse_fps", "speedup", "speedup_vs_blas",
    "dense_multiplies", "sparse_multiplies", "predicted_sparse_multiplies", "multiply_ratio", "threads",
)


class LeanDecoder:
    """Numpy-only decoder step for one utterance, mirroring ``Seq2Seq.decode_step``."""

    def __init__(self, model, counter: OpCounter | None = None, dense_kernel: str = "ordered"):
        if dense_kernel not in ("ordered", "blas"):
            raise ConfigError(f"dense_kernel must be 'ordered' or 'blas', got {dense_kernel!r}")
        self.blas = dense_kernel == "blas"
        c = model.config
        p = model.state_dict()
        self.config = c
        self.counter = counter
        self.layers = {}
        for layer in ("attention_rnn", "decoder_rnn"):
            w, b = p[f"{layer}.weight"], p[f"{layer}.bias"]
            if layer in model.sparse:
                self.layers[layer] = (model.sparse[layer].kernel, b)
            else:
                self.layers[layer] = (w if self.blas else np.ascontiguousarray(w.T), b)
        self.att_w, self.att_b = p["attention.weight"], p["attention.bias"]
        self.out_w, self.out_b = p["output.weight"], p["output.bias"]
        self.gaussian = c.mechanism == GAUSSIAN
        if not self.gaussian:
            self.delta_bias = model.attention.delta_bias
            self.sigma_bias = model.attention.sigma_bias
        self.dtype = model.dtype

    def _lstm(self, layer, x, h, c):
        kernel, bias = self.layers[layer]
        xh = np.concatenate([x, h])
        if isinstance(kernel, np.ndarray):
            if self.blas:
                z = kernel @ xh
            else:
                z = np.zeros(kernel.shape[1], dtype=kernel.dtype)
                _dense_matvec_by_columns(kernel, xh, z)
            if self.counter is not None:
                self.counter.add(kernel.size)
        else:
            z = sparse_matvec(kernel, xh, self.counter)
        return fused_lstm_gates(z + bias, c)

    def run(self, encoder_outputs: np.ndarray, steps: int):
        """Decode ``steps`` steps feeding back the output; returns ``(frames, positions)``."""
        c = self.config
        enc = np.asarray(encoder_outputs, dtype=self.dtype)
        J = enc.shape[0]
        pos = np.arange(1, J + 1, dtype=self.dtype)
        zeros = lambda n: np.zeros(n, dtype=self.dtype)  # noqa: E731
        att_h, att_c = zeros(c.attention_rnn_dim), zeros(c.attention_rnn_dim)
        dec_h, dec_c = zeros(c.decoder_rnn_dim), zeros(c.decoder_rnn_dim)
        ctx = zeros(c.encoder_dim)
        y = zeros(c.reduction_factor * c.mel_dim)
        K = 1 if self.gaussian else c.K
        mu = np.full(K, c.mu0, dtype=self.dtype)
        frames = np.empty((steps, y.size), dtype=self.dtype)
        positions = np.empty(steps)
        for t in range(steps):
            att_h, att_c = self._lstm("attention_rnn", np.concatenate([y, ctx]), att_h, att_c)
            raw = self.att_w @ att_h + self.att_b
            if self.gaussian:
                mu = mu + softplus_np(raw[:1])
                sigma = softplus_np(raw[1:2])
                alpha = np.exp(-((pos - mu) ** 2) / (2 * sigma * sigma))
                positions[t] = mu[0]
            else:
                omega = softmax_np(raw[:K])
                mu = mu + softplus_np(raw[K:2 * K] + self.delta_bias)
                sigma = softplus_np(raw[2 * K:] + self.sigma_bias)
                z = np.sqrt(2 * np.pi * sigma * sigma)
                alpha = ((omega / z)[:, None] * np.exp(-((pos - mu[:, None]) ** 2) / (2 * (sigma * sigma)[:, None]))).sum(0)
                positions[t] = float(omega @ mu)
            ctx = alpha @ enc
            dec_h, dec_c = self._lstm("decoder_rnn", np.concatenate([att_h, ctx]), dec_h, dec_c)
            y = self.out_w @ dec_h + self.out_b
            frames[t] = y
        return frames, positions


@dataclass
class BenchReport:
    hidden: int
    attention_input: int
    decoder_input: int
    sparsity: float
    block_shape: str
    frames: int
    steps: int
    dense_seconds: float
    sparse_seconds: float
    blas_seconds: float
    dense_fps: float
    sparse_fps: float
    speedup: float
    speedup_vs_blas: float
    dense_multiplies: int
    sparse_multiplies: int
    predicted_sparse_multiplies: float
    multiply_ratio: float
    threads: int = 1

    def as_dict(self) -> dict:
        return asdict(self)

    def pretty(self) -> str:
        return "\n".join(
            [
                f"decoder benchmark: H={self.hidden}, S={self.sparsity:.4f}, blocks {self.block_shape}, "
                f"{self.frames} frames ({self.steps} steps), {self.threads} thread(s)",
                f"  dense : {self.dense_seconds * 1e3:9.2f} ms  {self.dense_fps:10.1f} frames/s",
                f"  sparse: {self.sparse_seconds * 1e3:9.2f} ms  {self.sparse_fps:10.1f} frames/s",
                f"  blas  : {self.blas_seconds * 1e3:9.2f} ms  (dense via BLAS, for reference)",
                f"  speedup {self.speedup:.2f}x ({self.speedup_vs_blas:.2f}x vs BLAS), multiplies {self.sparse_multiplies} / {self.dense_multiplies} "
                f"= {self.multiply_ratio:.4f} (predicted {self.predicted_sparse_multiplies:.1f})",
            ]
        )


def write_report_csv(reports: list[BenchReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in reports:
            d = r.as_dict()
            w.writerow([d[k] for k in REPORT_FIELDS])


def _check_pair(dense, sparse) -> None:
    a, b = dense.config.to_dict(), sparse.config.to_dict()
    if a != b:
        diff = sorted(k for k in a if a[k] != b[k])
        raise ConfigError(f"benchmark models differ in architecture: {diff}")


def _interleaved_medians(fns: dict, warmup: int, repeats: int) -> dict[str, float]:
    """Median wall time per callable, alternating callables within each round
    so that load drift hits all of them alike."""
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    times = {name: [] for name in fns}
    for _ in range(repeats):
        for name, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            times[name].append(time.perf_counter() - t0)
    return {name: statistics.median(t) for name, t in times.items()}


def bench_decoder(dense_model, sparse_model, frames: int = 200, warmup: int = 2, repeats: int = 5,
                  J: int = 20, seed: int = 0) -> BenchReport:
    """Time ``frames`` decoded frames through both models on identical inputs."""
    _check_pair(dense_model, sparse_model)
    if frames < 1 or repeats < 1 or warmup < 0 or J < 1:
        raise ConfigError("frames, repeats and J must be >= 1 and warmup >= 0")
    c = dense_model.config
    steps = -(-frames // c.reduction_factor)
    ids = np.random.default_rng(seed).integers(0, c.vocab_size, size=J)
    enc = dense_model.encode(ids).data[0]

    counts = {}
    for name, model in (("dense", dense_model), ("sparse", sparse_model)):
        counter = OpCounter()
        LeanDecoder(model, counter).run(enc, steps)
        counts[name] = counter.multiplies

    with threadpool_limits(limits=1):
        runners = {
            "dense": LeanDecoder(dense_model),
            "sparse": LeanDecoder(sparse_model),
            "blas": LeanDecoder(dense_model, dense_kernel="blas"),
        }
        seconds = _interleaved_medians({name: (lambda d=d: d.run(enc, steps)) for name, d in runners.items()},
                                       warmup, repeats)

    H = c.attention_rnn_dim
    sparsities, blocks, predicted = [], set(), 0.0
    for layer, in_dim, hid in (("attention_rnn", c.reduction_factor * c.mel_dim + c.encoder_dim, c.attention_rnn_dim),
                               ("decoder_rnn", c.attention_rnn_dim + c.encoder_dim, c.decoder_rnn_dim)):
        w = sparse_model.sparse.get(layer)
        s = w.kernel.sparsity if w is not None else 0.0
        sparsities.append(s)
        blocks.add("x".join(map(str, w.kernel.block_shape)) if w is not None else "dense")
        predicted += count_ops(in_dim, hid, s) * steps
    return BenchReport(
        hidden=H,
        attention_input=c.reduction_factor * c.mel_dim + c.encoder_dim,
        decoder_input=c.attention_rnn_dim + c.encoder_dim,
        sparsity=float(np.mean(sparsities)),
        block_shape="/".join(sorted(blocks)),
        frames=steps * c.reduction_factor,
        steps=steps,
        dense_seconds=seconds["dense"],
        sparse_seconds=seconds["sparse"],
        blas_seconds=seconds["blas"],
        dense_fps=steps * c.reduction_factor / seconds["dense"],
        sparse_fps=steps * c.reduction_factor / seconds["sparse"],
        speedup=seconds["dense"] / seconds["sparse"],
        speedup_vs_blas=seconds["blas"] / seconds["sparse"],
        dense_multiplies=counts["dense"],
        sparse_multiplies=counts["sparse"],
        predicted_sparse_multiplies=predicted,
        multiply_ratio=counts["sparse"] / counts["dense"],
    )


def bench_models(hidden: int = 256, sparsity: float = 0.9, block_shape=(16, 1), seed: int = 0, **overrides):
    """Randomly initialised dense model and its one-shot pruned copy."""
    from ..model import ModelConfig, Seq2Seq

    cfg = ModelConfig(attention_rnn_dim=hidden, decoder_rnn_dim=hidden, seed=seed, **overrides)
    dense = Seq2Seq(cfg)
    sparse = Seq2Seq(cfg)
    sparse.load_state_dict(dense.state_dict())
    sparse.prune(sparsity, block_shape)
    return dense, sparse
