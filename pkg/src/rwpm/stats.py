"""Monte Carlo summaries and CSV output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class RunningStats:
    """Mean and variance accumulator with an associative merge (Chan et al.)."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, values) -> "RunningStats":
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            return self
        other = RunningStats(values.size, float(values.mean()), float(((values - values.mean()) ** 2).sum()))
        return self.merge(other)

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.m2 += other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else math.nan

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n > 1 else math.nan


def mean_stderr(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float(values.mean()) if values.size else math.nan, math.nan
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


@dataclass(frozen=True)
class WeightedEstimate:
    """Self-normalized importance-sampling estimate."""

    value: float
    stderr: float
    ess: float
    n: int


def self_normalized(values, weights) -> WeightedEstimate:
    """``sum w f / sum w`` with a delta-method standard error.

    ``values`` may carry leading sample axis plus trailing statistic axes.
    """
    w = np.asarray(weights, dtype=float)
    f = np.asarray(values, dtype=float)
    n = w.size
    total = w.sum()
    if total <= 0:
        return WeightedEstimate(math.nan, math.nan, 0.0, n)
    wn = w / total
    shape = (n,) + (1,) * (f.ndim - 1)
    est = np.sum(wn.reshape(shape) * f, axis=0)
    resid = f - est
    var = np.sum((wn**2).reshape(shape) * resid**2, axis=0)
    ess = float(total**2 / np.sum(w * w))
    return WeightedEstimate(est if np.ndim(est) else float(est), np.sqrt(var) if np.ndim(var) else math.sqrt(var), ess, n)


@dataclass
class StatReport:
    """Rows of ``(params..., statistic, value, stderr, n)``."""

    name: str
    rows: list[dict] = field(default_factory=list)
    summary: list[str] = field(default_factory=list)

    def add(self, statistic: str, value, stderr=math.nan, n: int = 0, **params) -> None:
        row = dict(params)
        row.update(statistic=statistic, value=float(value), stderr=float(stderr), n=int(n))
        self.rows.append(row)

    def get(self, statistic: str, **params) -> dict:
        for row in self.rows:
            if row["statistic"] == statistic and all(row.get(k) == v for k, v in params.items()):
                return row
        raise KeyError(f"{statistic} with {params} not in report {self.name}")

    def values(self, statistic: str) -> np.ndarray:
        return np.array([r["value"] for r in self.rows if r["statistic"] == statistic])

    def columns(self) -> list[str]:
        params: list[str] = []
        for row in self.rows:
            for key in row:
                if key not in ("statistic", "value", "stderr", "n") and key not in params:
                    params.append(key)
        return params + ["statistic", "value", "stderr", "n"]


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path, columns, rows, config_hash: str | None = None) -> Path:
    """Write rows (dicts or sequences) with 17-significant-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c, "") for c in columns]
            writer.writerow([format_value(v) for v in row])
    return path


def write_report(path, report: StatReport, config_hash: str | None = None) -> Path:
    return write_csv(path, report.columns(), report.rows, config_hash)
