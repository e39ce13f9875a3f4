"""Comparison tables and figures for completed runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


@dataclass
class RunSummary:
    name: str
    accuracy: np.ndarray  # (rounds, M), NaN when not trained
    t_rounds: np.ndarray

    @property
    def rounds(self) -> int:
        return len(self.t_rounds)

    @property
    def mean_accuracy(self) -> np.ndarray:
        """Arithmetic mean over tasks, per round."""
        return self.accuracy.mean(axis=1)

    @property
    def task_variance(self) -> np.ndarray:
        """Population variance over tasks, per round."""
        return self.accuracy.var(axis=1)

    @property
    def final_accuracy(self) -> float:
        return float(self.mean_accuracy[-1])

    @property
    def average_accuracy(self) -> float:
        return float(np.mean(self.mean_accuracy))

    @property
    def mean_variance(self) -> float:
        return float(np.mean(self.task_variance))

    @property
    def total_time(self) -> float:
        return float(np.sum(self.t_rounds))


def improvement(a: float, b: float) -> float:
    """Relative improvement of ``a`` over ``b`` in percent."""
    if b == 0:
        return math.nan if a == 0 else math.copysign(math.inf, a)
    return (a - b) / b * 100.0


COMPARE_COLUMNS = [
    "run", "rounds", "final_accuracy", "average_accuracy", "mean_task_variance", "total_time",
    "final_improvement_pct", "average_improvement_pct", "time_improvement_pct",
]


def compare(runs: list[RunSummary], baseline: int = 0) -> list[dict]:
    """One row per run; improvements are relative to ``runs[baseline]``.

    Time improvement is the relative reduction of total time, so positive is
    faster.
    """
    if len(runs) < 2:
        raise ValueError("compare needs at least two runs")
    n = runs[0].rounds
    if any(r.rounds != n for r in runs):
        raise ValueError("runs have different round counts: " + ", ".join(f"{r.name}={r.rounds}" for r in runs))
    ref = runs[baseline]
    rows = []
    for r in runs:
        rows.append({
            "run": r.name,
            "rounds": r.rounds,
            "final_accuracy": r.final_accuracy,
            "average_accuracy": r.average_accuracy,
            "mean_task_variance": r.mean_variance,
            "total_time": r.total_time,
            "final_improvement_pct": improvement(r.final_accuracy, ref.final_accuracy),
            "average_improvement_pct": improvement(r.average_accuracy, ref.average_accuracy),
            "time_improvement_pct": 0.0 - improvement(r.total_time, ref.total_time),
        })
    return rows


def write_table(path, rows: list[dict], columns=COMPARE_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if isinstance(row[c], float) and math.isnan(row[c]) else
                        (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns])


def format_table(rows: list[dict], columns=COMPARE_COLUMNS) -> str:
    def cell(v):
        if isinstance(v, float):
            return "-" if math.isnan(v) else f"{v:.4g}"
        return str(v)

    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# figures


def plot_run(result, out_dir) -> list[Path]:
    """Per-task accuracy and per-round time of one run."""
    out = Path(out_dir)
    paths = []
    acc = result.accuracy
    if acc.size and not np.all(np.isnan(acc)):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for m in range(acc.shape[1]):
            ax.plot(np.arange(1, len(acc) + 1), acc[:, m], label=f"task {m}")
        ax.plot(np.arange(1, len(acc) + 1), acc.mean(axis=1), "k--", label="mean")
        ax.set_xlabel("round")
        ax.set_ylabel("validation accuracy")
        ax.legend()
        fig.tight_layout()
        paths.append(out / "accuracy.png")
        fig.savefig(paths[-1], dpi=110)
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(np.arange(1, len(result.t_rounds) + 1), result.t_rounds)
    ax.set_xlabel("round")
    ax.set_ylabel("round time (s)")
    fig.tight_layout()
    paths.append(out / "round_time.png")
    fig.savefig(paths[-1], dpi=110)
    plt.close(fig)
    return paths


def plot_compare(runs: list[RunSummary], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    trained = [r for r in runs if not np.all(np.isnan(r.accuracy))]
    if trained:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
        for r in trained:
            x = np.arange(1, r.rounds + 1)
            axes[0].plot(x, r.mean_accuracy, label=r.name)
            axes[1].plot(x, r.task_variance, label=r.name)
        axes[0].set_ylabel("average task accuracy")
        axes[1].set_ylabel("task accuracy variance")
        for ax in axes:
            ax.set_xlabel("round")
        axes[0].legend()
        fig.tight_layout()
        paths.append(out / "compare_accuracy.png")
        fig.savefig(paths[-1], dpi=110)
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.bar([r.name for r in runs], [r.total_time for r in runs])
    ax.set_ylabel("total time (s)")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    paths.append(out / "compare_time.png")
    fig.savefig(paths[-1], dpi=110)
    plt.close(fig)
    return paths


def plot_sweep(values, series: dict, xlabel: str, ylabel: str, path) -> Path:
    """Line plot of ``series[name] -> list of y`` over ``values``."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, ys in series.items():
        ax.plot(values, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
