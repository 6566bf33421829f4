"""Evaluation statistics: success at the final step, IQM, bootstrap CIs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METRICS_COLUMNS = ("step", "seed", "iqm_return", "iqm_success", "ci_lo", "ci_hi",
                   "critic_loss", "policy_loss", "alpha")


@dataclass
class EpisodeRecord:
    successes: list
    dones: list
    rewards: list | None = None


def success_at_final(record: EpisodeRecord) -> bool:
    """Success flag of the last step; intermediate successes do not count."""
    if not record.dones or not record.dones[-1]:
        raise ValueError("episode record is truncated (last step is not terminal)")
    if len(record.successes) != len(record.dones):
        raise ValueError("successes and dones differ in length")
    return bool(record.successes[-1])


def _trim(n: int) -> int:
    return int(np.floor(0.25 * n))


def iqm(values) -> float:
    """Mean after dropping ``floor(n/4)`` values from each end of the sorted input."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("iqm of empty input")
    k = _trim(x.size)
    return float(x[k: x.size - k].mean())


def _iqm_rows(samples: np.ndarray) -> np.ndarray:
    s = np.sort(samples, axis=-1)
    k = _trim(s.shape[-1])
    return s[..., k: s.shape[-1] - k].mean(axis=-1)


def bootstrap_ci(values, n_boot: int = 2000, confidence: float = 0.95, rng=None) -> tuple[float, float]:
    """Percentile bootstrap interval of the IQM over resampled values (seeds)."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("bootstrap_ci needs at least 2 values")
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    rng = np.random.default_rng(rng)
    stats = _iqm_rows(x[rng.integers(x.size, size=(n_boot, x.size))])
    a = (1.0 - confidence) / 2
    lo, hi = np.quantile(stats, [a, 1.0 - a])
    return float(lo), float(hi)


@dataclass
class RunCurve:
    steps: np.ndarray   # (T,)
    values: np.ndarray  # (seeds, T)

    def __post_init__(self):
        self.steps = np.asarray(self.steps)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[1] != self.steps.shape[0]:
            raise ValueError("values must be (seeds, len(steps))")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite entries in run curve")

    @property
    def num_seeds(self) -> int:
        return self.values.shape[0]

    def iqm(self) -> np.ndarray:
        return np.array([iqm(col) for col in self.values.T])

    def band(self, n_boot: int = 2000, confidence: float = 0.95, seed: int = 0):
        """Per-step bootstrap CI over seeds; ``None`` with fewer than two seeds."""
        if self.num_seeds < 2:
            return None
        rows = [bootstrap_ci(col, n_boot, confidence, rng=np.random.default_rng([seed, i]))
                for i, col in enumerate(self.values.T)]
        return np.array(rows).T


def aggregate(task_curves: dict) -> np.ndarray:
    """IQM per task, then the plain mean across tasks."""
    per_task = [curve.iqm() for curve in task_curves.values()]
    return np.mean(per_task, axis=0)


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV; malformed lines raise ``ValueError`` naming the line number."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}:1: expected header {','.join(METRICS_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} fields, got {len(rec)}")
            try:
                row = {k: float(v) for k, v in zip(METRICS_COLUMNS, rec)}
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            row["step"], row["seed"] = int(row["step"]), int(row["seed"])
            rows.append(row)
    return rows


def curve_from_rows(rows: list[dict], metric: str = "iqm_success") -> RunCurve:
    """Stack rows from one or more seeds into a curve over the steps all seeds share."""
    seeds = sorted({r["seed"] for r in rows})
    by_seed = {s: {r["step"]: r[metric] for r in rows if r["seed"] == s} for s in seeds}
    steps = sorted(set.intersection(*(set(v) for v in by_seed.values())))
    values = [[by_seed[s][t] for t in steps] for s in seeds]
    return RunCurve(np.array(steps), np.array(values))
