"""PNG figures for reports (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_alignment(alignments: np.ndarray, path, mu: np.ndarray | None = None, title: str = "") -> Path:
    """Heat map of ``(steps, J)`` weights, with the position track if given."""
    a = np.asarray(alignments, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(a.T, origin="lower", aspect="auto", interpolation="nearest", cmap="viridis",
                   extent=(0.5, a.shape[0] + 0.5, 0.5, a.shape[1] + 0.5))
    if mu is not None:
        ax.plot(np.arange(1, len(mu) + 1), mu, color="white", lw=1, label="position")
        ax.legend(loc="upper left", fontsize=8)
    ax.set_xlabel("decoder step")
    ax.set_ylabel("input position j")
    ax.set_title(title or "alignment")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curve(metrics: list[dict], path) -> Path:
    steps = [m["step"] for m in metrics]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for key in ("total_loss", "l1_pre", "l1_post"):
        top.plot(steps, [m[key] for m in metrics], label=key)
    top.set_yscale("log")
    top.set_ylabel("loss")
    top.legend(fontsize=8)
    bottom.plot(steps, [m["stop_loss"] for m in metrics], color="C3")
    bottom.set_ylabel("|mu_T - (J+1)|")
    bottom.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def plot_benchmark(reports, path) -> Path:
    labels = [f"S={r.sparsity:.2f}" for r in reports]
    x = np.arange(len(reports))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(x - 0.2, [r.dense_fps for r in reports], 0.4, label="dense")
    ax.bar(x + 0.2, [r.sparse_fps for r in reports], 0.4, label="block-sparse")
    for i, r in enumerate(reports):
        ax.annotate(f"{r.speedup:.2f}x", (i + 0.2, r.sparse_fps), ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, labels)
    ax.set_ylabel("frames / s")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_robustness(rows: list[dict], path) -> Path:
    keys = ("non_termination", "coverage_error", "repetition")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bottom = np.zeros(len(rows))
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        ax.bar([r["mechanism"] for r in rows], vals, bottom=bottom, label=key)
        bottom += vals
    ax.set_ylabel("aggregate error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
