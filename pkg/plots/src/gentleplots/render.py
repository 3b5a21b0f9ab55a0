"""Render training curves and representation scatter plots.

Consumes only the CSV files a training run leaves behind:

* metrics.csv -- rows (epoch, step, split, metric, value)
* reps.csv    -- rows (task_id, split, z1..zm, proj_x, proj_y)

Curves show one line per (split, metric); when several run directories
are given, the mean across runs is drawn with a +-1 std band. The
scatter plot draws proj_x/proj_y colored by task id, one legend entry
per task. Everything here is read-only over the run directories.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


class PlotError(Exception):
    """Bad inputs: missing files, empty data, unknown columns."""


@dataclass
class PlotSpec:
    inputs: list[str]          # run directories (curves) or reps.csv paths (scatter)
    output: str
    kind: str                  # "curves" | "scatter"
    smoothing: int = 1         # moving-average window over epochs
    metric: str | None = None  # curves: restrict to one metric name

    def __post_init__(self):
        if self.kind not in ("curves", "scatter"):
            raise PlotError(f"unknown plot kind {self.kind!r}")
        if self.smoothing < 1:
            raise PlotError("smoothing window must be >= 1")
        if not self.inputs:
            raise PlotError("need at least one input")


def read_metrics(path):
    if not os.path.exists(path):
        raise PlotError(f"metrics file not found: {path}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["epoch", "step", "split", "metric", "value"]:
            raise PlotError(f"{path}: unexpected metrics header {header}")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), row[2], row[3], float(row[4])))
    if not rows:
        raise PlotError(f"{path}: no metric rows")
    return rows


def read_reps(path):
    if not os.path.exists(path):
        raise PlotError(f"reps file not found: {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:2] != ["task_id", "split"] or \
                header[-2:] != ["proj_x", "proj_y"]:
            raise PlotError(f"{path}: unexpected reps header {header}")
        task_ids, xs, ys = [], [], []
        for row in reader:
            task_ids.append(int(row[0]))
            xs.append(float(row[-2]))
            ys.append(float(row[-1]))
    if not task_ids:
        raise PlotError(f"{path}: no representation rows")
    return np.array(task_ids), np.array(xs), np.array(ys)


def _smooth(values, window):
    if window <= 1 or len(values) < 2:
        return np.asarray(values, dtype=float)
    kernel = np.ones(window) / window
    padded = np.concatenate([np.repeat(values[0], window - 1), values])
    return np.convolve(padded, kernel, mode="valid")


def _series_by_key(rows):
    series = {}
    for epoch, step, split, metric, value in rows:
        series.setdefault((split, metric), []).append((step, value))
    return {key: sorted(points) for key, points in series.items()}


def render_curves(spec: PlotSpec) -> str:
    per_run = []
    for run_dir in spec.inputs:
        path = run_dir if run_dir.endswith(".csv") else os.path.join(run_dir, "metrics.csv")
        per_run.append(_series_by_key(read_metrics(path)))

    keys = sorted(set().union(*[set(s) for s in per_run]))
    if spec.metric is not None:
        keys = [k for k in keys if k[1] == spec.metric]
        if not keys:
            raise PlotError(f"metric {spec.metric!r} not present in the inputs")

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for split, metric in keys:
        runs = [dict(s.get((split, metric), [])) for s in per_run]
        steps = sorted(set.intersection(*[set(r) for r in runs if r]) or set())
        if not steps:
            continue
        values = np.array([[r[s] for s in steps] for r in runs if r])
        mean = _smooth(values.mean(axis=0), spec.smoothing)
        label = f"{split}/{metric}"
        line, = ax.plot(steps, mean, label=label)
        if values.shape[0] > 1:
            std = _smooth(values.std(axis=0), spec.smoothing)
            ax.fill_between(steps, mean - std, mean + std,
                            color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("gradient step")
    ax.set_ylabel("value")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=130)
    plt.close(fig)
    return spec.output


def render_scatter(spec: PlotSpec) -> str:
    if len(spec.inputs) != 1:
        raise PlotError("scatter takes exactly one reps.csv (or run directory)")
    path = spec.inputs[0]
    if not path.endswith(".csv"):
        path = os.path.join(path, "reps.csv")
    task_ids, xs, ys = read_reps(path)

    fig, ax = plt.subplots(figsize=(5.5, 5))
    cmap = plt.get_cmap("tab10")
    for i, task in enumerate(sorted(set(task_ids.tolist()))):
        mask = task_ids == task
        ax.scatter(xs[mask], ys[mask], s=18, color=cmap(i % 10),
                   label=f"task {task}", alpha=0.8)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(fontsize=8, loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=130)
    plt.close(fig)
    return spec.output


def render(spec: PlotSpec) -> str:
    """Dispatch on the plot kind; returns the written image path."""
    if spec.kind == "curves":
        return render_curves(spec)
    return render_scatter(spec)
