"""IQM curves with bootstrap bands from metrics CSVs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalstats import RunCurve, aggregate, curve_from_rows, read_metrics  # noqa: E402

PLOT_METRICS = ("iqm_success", "iqm_return")


def find_metrics(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    found = sorted(path.rglob("metrics.csv"))
    if not found:
        raise FileNotFoundError(f"no metrics.csv under {path}")
    return found


def task_of(csv_path: Path) -> str:
    """``env_id/reward_mode`` from the config snapshot next to the CSV, if any."""
    snap = csv_path.parent / "config.txt"
    if not snap.exists():
        return "task"
    kv = dict(line.split(" = ", 1) for line in snap.read_text().splitlines() if " = " in line)
    return f"{kv.get('env_id', 'task')}-{kv.get('reward_mode', '')}".rstrip("-")


def load_runs(paths, labels=None) -> dict:
    """``{label: {task: rows}}``; each input path is one labelled run group."""
    runs = {}
    for k, p in enumerate(paths):
        label = labels[k] if labels else Path(p).name or str(p)
        by_task = defaultdict(list)
        for csv_path in find_metrics(p):
            by_task[task_of(csv_path)].extend(read_metrics(csv_path))
        runs[label] = dict(by_task)
    return runs


def _draw(ax, curve, label, seed):
    line, = ax.plot(curve.steps, curve.iqm(), label=label)
    band = curve.band(n_boot=1000, seed=seed)
    if band is not None:
        ax.fill_between(curve.steps, band[0], band[1], color=line.get_color(), alpha=0.25, linewidth=0)


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_runs(paths, out_dir, labels=None, metrics=PLOT_METRICS) -> list[Path]:
    """One figure per (task, metric) overlaying every run group, plus task aggregates."""
    runs = load_runs(paths, labels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = sorted({t for per in runs.values() for t in per})
    written = []
    for metric in metrics:
        for task in tasks:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for i, (label, per) in enumerate(runs.items()):
                if task in per:
                    _draw(ax, curve_from_rows(per[task], metric), label, seed=i)
            ax.set_xlabel("env steps")
            ax.set_ylabel(metric)
            ax.set_title(task)
            ax.legend()
            path = out_dir / f"{task}_{metric}.png"
            _save(fig, path)
            written.append(path)
        if len(tasks) > 1:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for label, per in runs.items():
                curves = {t: curve_from_rows(rows, metric) for t, rows in per.items()}
                steps = sorted(set.intersection(*(set(c.steps.tolist()) for c in curves.values())))
                trimmed = {t: _restrict(c, steps) for t, c in curves.items()}
                ax.plot(steps, aggregate(trimmed), label=label)
            ax.set_xlabel("env steps")
            ax.set_ylabel(f"{metric} (mean of per-task IQM)")
            ax.set_title("aggregate")
            ax.legend()
            path = out_dir / f"aggregate_{metric}.png"
            _save(fig, path)
            written.append(path)
    return written


def _restrict(curve, steps):
    keep = np.isin(curve.steps, steps)
    return RunCurve(curve.steps[keep], curve.values[:, keep])
