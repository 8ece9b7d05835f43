"""Teacher-forced training on the toy task, with optional gradual pruning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor_core as tc
from ..errors import ConfigError, DivergenceError, NumericError
from ..sparsity import BlockSparseMatrix, Pruner, PruneSchedule
from .config import ModelConfig
from .losses import total_loss
from .seq2seq import PRUNABLE, Seq2Seq

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "total_loss", "l1_pre", "l1_post", "stop_loss", "mean_mu_T")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 0.1
    min_lr_fraction: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 10
    prune: PruneSchedule | None = None
    prune_layers: tuple[str, ...] = PRUNABLE

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and log_every >= 1 required")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1 or self.clip_norm <= 0:
            raise ConfigError("learning_rate > 0, momentum in [0, 1) and clip_norm > 0 required")
        if not 0 < self.min_lr_fraction <= 1:
            raise ConfigError(f"min_lr_fraction must be in (0, 1], got {self.min_lr_fraction}")
        bad = set(self.prune_layers) - set(PRUNABLE)
        if bad:
            raise ConfigError(f"cannot prune {sorted(bad)}; choose from {PRUNABLE}")

    def lr_at(self, step: int) -> float:
        """Cosine decay from ``learning_rate`` to ``min_lr_fraction * learning_rate``."""
        frac = step / max(1, self.steps - 1)
        low = self.min_lr_fraction
        return self.learning_rate * (low + (1 - low) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainResult:
    model: Seq2Seq
    metrics: list[dict] = field(default_factory=list)
    pruner: Pruner | None = None

    def write_metrics_csv(self, path: str | Path) -> None:
        write_metrics_csv(self.metrics, path)


def write_metrics_csv(metrics: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in metrics:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


class BatchSampler:
    """Draws equal-length batches from ``(J, T)`` buckets."""

    def __init__(self, dataset, batch_size: int, rng: np.random.Generator):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        buckets = dataset.buckets()
        self.keys = list(buckets)
        self.members = [np.array(buckets[k]) for k in self.keys]
        sizes = np.array([len(m) for m in self.members], dtype=np.float64)
        self.weights = sizes / sizes.sum()

    def __call__(self):
        b = self.rng.choice(len(self.keys), p=self.weights)
        members = self.members[b]
        take = self.rng.choice(members, size=min(self.batch_size, len(members)), replace=False)
        utts = [self.dataset[int(i)] for i in np.sort(take)]
        ids = np.stack([u.ids for u in utts])
        mels = np.stack([u.mel for u in utts])
        return ids, mels


def loss_for_batch(model: Seq2Seq, ids, mels):
    out = model.teacher_forward(ids, mels)
    c = model.config
    parts = total_loss(mels, out.y_pre, out.y_post, out.mu_last, ids.shape[1], c.delay_frames, c.stop_lambda)
    return parts, out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_toy(
    dataset,
    config: ModelConfig,
    train: TrainConfig = TrainConfig(),
    model: Seq2Seq | None = None,
    callback: Callable[[int, Seq2Seq, Pruner | None], None] | None = None,
) -> TrainResult:
    """SGD with momentum, global-norm clipping and cosine learning-rate decay.

    ``callback(step, model, pruner)`` runs after every update. Logged
    metrics describe the batch seen at that step before its update.
    """
    if dataset.spec.mel_dim != config.mel_dim or dataset.spec.vocab_size > config.vocab_size:
        raise ConfigError("dataset mel_dim / vocab_size do not fit the model config")
    model = model or Seq2Seq(config)
    if model.sparse:
        raise ConfigError("train a dense model; sparsity comes from the pruning schedule")
    params = model.named_parameters()
    names = list(params)
    rng = np.random.default_rng(train.seed)
    sampler = BatchSampler(dataset, train.batch_size, rng)
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    pruner = None
    if train.prune is not None:
        shapes = {f"{n}.weight": params[f"{n}.weight"].shape for n in train.prune_layers}
        pruner = Pruner(train.prune, shapes)
    result = TrainResult(model=model, pruner=pruner)

    for step in range(train.steps):
        ids, mels = sampler()
        tape = tc.GradTape()
        try:
            with tape:
                parts, out = loss_for_batch(model, ids, mels)
            grad_list = tape.gradient(parts.total, [params[k] for k in names])
        except NumericError as exc:
            raise DivergenceError(f"non-finite values at step {step}: {exc}") from exc
        if not np.isfinite(parts.total.item()):
            raise DivergenceError(f"loss is {parts.total.item()} at step {step}")
        grads = dict(zip(names, grad_list))
        if pruner is not None:
            pruner.mask_gradients(grads)
        clip_by_global_norm(grads, train.clip_norm)
        lr = train.lr_at(step)
        for k, p in params.items():
            v = velocity[k]
            v *= train.momentum
            v += grads[k]
            p.data = (p.data - lr * v).astype(model.dtype, copy=False)
        if pruner is not None:
            weights = {k: params[k].data for k in pruner.names}
            pruner.step(step + 1, weights)
            # momentum would otherwise push pruned entries off zero
            pruner.apply(weights)
            pruner.apply(velocity)
        if step % train.log_every == 0 or step == train.steps - 1:
            row = {
                "step": step,
                "total_loss": parts.total.item(),
                "l1_pre": parts.l1_pre,
                "l1_post": parts.l1_post,
                "stop_loss": parts.stop,
                "mean_mu_T": float(np.mean(out.positions[:, -1])),
            }
            result.metrics.append(row)
            log.debug("step %d loss %.4f stop %.3f", step, row["total_loss"], row["stop_loss"])
        if callback is not None:
            callback(step + 1, model, pruner)
    return result


def sparsify_from_pruner(model: Seq2Seq, pruner: Pruner) -> None:
    """Install the pruner's final masks as block-sparse kernels."""
    for name, mask in pruner.masks.items():
        layer = name.rsplit(".", 1)[0]
        kernel = BlockSparseMatrix.from_dense(model.params[name].data, pruner.schedule.block_shape, mask)
        model.set_sparse(layer, kernel)
