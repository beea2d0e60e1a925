"""Latency percentiles, lognormal fits, and cross-run comparison tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class RunSummary:
    scenario_id: str
    scheduler: str
    seed: int
    mean_latency_ms: float
    std_latency_ms: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    mean_cpu_util: float
    mean_mem_util: float
    mean_net_util: float
    achieved_tps: float
    sanitized_actions: int
    cache_hit_rate: float
    queue_backlog_integral: float = 0.0
    first_scale_up_tick: int = -1  # -1: never scaled up

    def __post_init__(self) -> None:
        if not self.p50_ms <= self.p95_ms <= self.p99_ms:
            raise ValueError("percentiles must be ordered p50 <= p95 <= p99")
        for u in (self.mean_cpu_util, self.mean_mem_util, self.mean_net_util):
            if not 0.0 <= u <= 1.0:
                raise ValueError(f"utilization {u} outside [0, 1]")


def percentiles(samples, levels) -> list[float]:
    """Nearest-rank percentiles on the sorted sample (bit-exact across platforms)."""
    data = np.sort(np.asarray(samples, dtype=float))
    if data.size == 0:
        raise ValueError("percentiles of an empty sample")
    out = []
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValueError(f"percentile level {level} outside (0, 1)")
        rank = max(1, math.ceil(level * data.size))
        out.append(float(data[rank - 1]))
    return out


def weighted_percentile(samples, weights, level: float) -> float:
    """Nearest-rank percentile where each sample stands for `weight` requests."""
    samples = np.asarray(samples, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if samples.size == 0:
        raise ValueError("percentile of an empty sample")
    order = np.argsort(samples, kind="stable")
    cum = np.cumsum(weights[order])
    target = level * cum[-1]
    idx = int(np.searchsorted(cum, target, side="left"))
    return float(samples[order][min(idx, samples.size - 1)])


def _normal_cdf(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))


def fit_lognormal(samples) -> tuple[float, float, float]:
    """MLE (mu, sigma) on log-samples plus the KS statistic against the fit."""
    data = np.asarray(samples, dtype=float)
    if data.size == 0:
        raise ValueError("cannot fit an empty sample")
    if np.any(data <= 0):
        raise ValueError("lognormal fit requires strictly positive samples")
    logs = np.log(data)
    mu = float(logs.mean())
    sigma = float(logs.std())
    if sigma < 1e-12 * max(1.0, abs(mu)):  # constant sample: exactly degenerate
        sigma = 0.0
    n = data.size
    sorted_logs = np.sort(logs)
    if sigma == 0.0:
        ks = 0.0
    else:
        fitted = _normal_cdf((sorted_logs - mu) / sigma)
        i = np.arange(1, n + 1)
        ks = float(np.max(np.maximum(i / n - fitted, fitted - (i - 1) / n)))
    return mu, sigma, ks


def ks_critical_value(n: int, alpha: float = 0.05) -> float:
    """Asymptotic two-sided KS critical value."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c / math.sqrt(n)


_LOWER_IS_BETTER = ("latency", "_ms", "backlog", "sanitized")


def _improvement(metric: str, before: float, after: float) -> float:
    """Signed relative improvement in percent; direction-aware per metric."""
    if before == 0.0:
        return 0.0
    change = (after - before) / abs(before) * 100.0
    lower_better = any(tag in metric for tag in _LOWER_IS_BETTER)
    return (-change if lower_better else change) + 0.0  # normalize -0.0


def compare_runs(baseline: RunSummary, candidate: RunSummary) -> dict[str, dict[str, float]]:
    """Per-metric (before, after, improvement %) table, Table-III shaped."""
    if baseline.scenario_id != candidate.scenario_id:
        raise ValueError(
            f"scenario mismatch: {baseline.scenario_id!r} vs {candidate.scenario_id!r}"
        )
    table: dict[str, dict[str, float]] = {}
    for name, before in asdict(baseline).items():
        if not isinstance(before, (int, float)) or isinstance(before, bool):
            continue
        if name in ("seed", "first_scale_up_tick"):
            continue
        after = getattr(candidate, name)
        table[name] = {
            "before": float(before),
            "after": float(after),
            "improvement_pct": _improvement(name, float(before), float(after)),
        }
    return table


# --- serialization (stable field order, lossless round-trip) -----------------

_FIELDS = list(RunSummary.__dataclass_fields__)


def summary_to_json(summary: RunSummary) -> str:
    return json.dumps({name: getattr(summary, name) for name in _FIELDS}, indent=2)


def summary_from_json(text: str) -> RunSummary:
    return RunSummary(**json.loads(text))


def save_summary(summary: RunSummary, path: str | Path) -> None:
    Path(path).write_text(summary_to_json(summary) + "\n")


def load_summary(path: str | Path) -> RunSummary:
    return summary_from_json(Path(path).read_text())


def save_comparison_csv(table: dict[str, dict[str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "before", "after", "improvement_pct"])
        for metric, row in table.items():
            writer.writerow(
                [metric, repr(row["before"]), repr(row["after"]), repr(row["improvement_pct"])]
            )


def load_comparison_csv(path: str | Path) -> dict[str, dict[str, float]]:
    table: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table[row["metric"]] = {
                "before": float(row["before"]),
                "after": float(row["after"]),
                "improvement_pct": float(row["improvement_pct"]),
            }
    return table
