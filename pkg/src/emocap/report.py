"""Figure rendering for training logs and evaluation reports."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalmetrics import METRIC_NAMES


def read_metrics_csv(path) -> dict:
    """Columns of a training metrics CSV as name -> list of floats."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise ValueError(f"{path}: not a metrics CSV (missing 'step' column)")
        cols = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in cols:
                cols[name].append(float(row[name]))
    if not cols["step"]:
        raise ValueError(f"{path}: metrics CSV has no data rows")
    return cols


def plot_training_curves(metrics_path, out_path) -> str:
    """Loss curves over steps, one line per non-zero loss column."""
    cols = read_metrics_csv(metrics_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("loss_total", "loss_mi", "loss_sccl", "loss_ce"):
        if name in cols and any(v != 0.0 for v in cols[name]):
            ax.plot(cols["step"], cols[name], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def plot_metric_bars(corpus_means: dict, out_path) -> str:
    """Bar chart of corpus-level metric means, matching the report CSV."""
    names = [n for n in METRIC_NAMES if n in corpus_means]
    values = [corpus_means[n] for n in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, values, color="tab:blue")
    ax.bar_label(bars, fmt="%.3f")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, max(1.0, max(values) * 1.15) if values else 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)
