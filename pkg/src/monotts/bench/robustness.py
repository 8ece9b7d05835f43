"""Mechanical alignment-quality proxies for skip and repeat failures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractError
from .data import STRESS_KINDS, StressSuite, ToyTaskSpec, stress_suite

COVERAGE_THRESHOLD = 0.3
STALL_DELTA = 0.01
SUMMARY_FIELDS = ("mechanism", "inputs", "non_termination", "coverage_error", "repetition", "aggregate")


def coverage_error(alignments: np.ndarray, threshold: float = COVERAGE_THRESHOLD) -> float:
    """Fraction of positions whose weight never exceeds ``threshold`` at any step."""
    a = np.asarray(alignments)
    if a.ndim != 2 or a.shape[1] < 1:
        raise ContractError(f"alignments must be (steps, J) with J >= 1, got {a.shape}")
    if a.shape[0] == 0:
        return 1.0
    return float(np.mean(~(a > threshold).any(axis=0)))


def repetition_proxy(mu: np.ndarray, frames_per_symbol: int, mu0: float = 0.0, eps: float = STALL_DELTA) -> float:
    """Fraction of steps inside runs of more than ``3 * k`` consecutive
    steps whose position advances by less than ``eps``."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.size == 0:
        return 0.0
    stalled = np.diff(np.concatenate([[mu0], mu])) < eps
    limit = 3 * frames_per_symbol
    flagged, run = 0, 0
    for s in np.append(stalled, False):
        if s:
            run += 1
        else:
            if run > limit:
                flagged += run
            run = 0
    return flagged / mu.size


def eval_max_steps(J: int, frames_per_symbol: int, r: int) -> int:
    """Step budget: three times the ideal ``k * J / r`` plus slack."""
    return math.ceil(3 * frames_per_symbol * J / r) + 10


@dataclass
class TraceMetrics:
    J: int
    steps: int
    truncated: bool
    coverage_error: float
    repetition: float

    @property
    def aggregate(self) -> float:
        return float(self.truncated) + self.coverage_error + self.repetition


def trace_metrics(trace, frames_per_symbol: int, mu0: float = 0.0) -> TraceMetrics:
    return TraceMetrics(
        J=trace.J,
        steps=trace.steps,
        truncated=bool(trace.truncated),
        coverage_error=coverage_error(trace.alignments),
        repetition=repetition_proxy(trace.mu, frames_per_symbol, mu0),
    )


@dataclass
class SuiteResult:
    kind: str
    traces: list[TraceMetrics]

    def mean(self, name: str) -> float:
        if name == "non_termination":
            return float(np.mean([t.truncated for t in self.traces]))
        return float(np.mean([getattr(t, name) for t in self.traces]))

    @property
    def aggregate(self) -> float:
        return self.mean("non_termination") + self.mean("coverage_error") + self.mean("repetition")


@dataclass
class RobustnessReport:
    mechanism: str
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def inputs(self) -> int:
        return sum(len(s.traces) for s in self.suites)

    def mean(self, name: str) -> float:
        """Average of per-suite means, so each suite counts equally."""
        return float(np.mean([s.mean(name) for s in self.suites]))

    @property
    def aggregate(self) -> float:
        return self.mean("non_termination") + self.mean("coverage_error") + self.mean("repetition")

    def summary_row(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "inputs": self.inputs,
            "non_termination": self.mean("non_termination"),
            "coverage_error": self.mean("coverage_error"),
            "repetition": self.mean("repetition"),
            "aggregate": self.aggregate,
        }


def robustness_eval(model, suites: list[StressSuite] | None = None, spec: ToyTaskSpec = ToyTaskSpec(),
                    seed: int = 0) -> RobustnessReport:
    """Free-running decode of every stress input with a per-input step budget."""
    if suites is None:
        suites = [stress_suite(kind, spec, seed=seed) for kind in STRESS_KINDS]
    if not suites:
        raise ConfigError("robustness_eval needs at least one suite")
    k = spec.frames_per_symbol
    r = model.config.reduction_factor
    report = RobustnessReport(model.config.mechanism)
    for suite in suites:
        traces = []
        for ids in suite.inputs:
            trace = model.infer(ids, max_steps=eval_max_steps(len(ids), k, r))
            traces.append(trace_metrics(trace, k, model.config.mu0))
        report.suites.append(SuiteResult(suite.kind, traces))
    return report


def _fmt(v) -> str:
    return v if isinstance(v, str) else (str(v) if isinstance(v, int) else repr(float(v)))


def write_summary_csv(reports: list[RobustnessReport], path: str | Path) -> None:
    """One row per mechanism."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for rep in reports:
            row = rep.summary_row()
            w.writerow([_fmt(row[k]) for k in SUMMARY_FIELDS])


def write_detail_csv(reports: list[RobustnessReport], path: str | Path) -> None:
    """One row per (mechanism, suite, input)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("mechanism", "suite", "index", "J", "steps", "truncated", "coverage_error", "repetition"))
        for rep in reports:
            for suite in rep.suites:
                for i, t in enumerate(suite.traces):
                    w.writerow((rep.mechanism, suite.kind, i, t.J, t.steps, int(t.truncated),
                                _fmt(t.coverage_error), _fmt(t.repetition)))


def read_summary_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["inputs"] = int(row["inputs"])
        for k in SUMMARY_FIELDS[2:]:
            row[k] = float(row[k])
    return rows
