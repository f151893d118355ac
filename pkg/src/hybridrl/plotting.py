"""Report rendering: learning curves to PNG and a flat per-round CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

ROUND_COLUMNS = ("seed", "t", "online_samples", "success_rate", "moving_average", "mean_return")


def load_metrics(run_dir) -> dict[int, list[dict]]:
    """Read every ``seed_<n>/metrics.jsonl`` below ``run_dir``."""
    out = {}
    for path in sorted(Path(run_dir).glob("seed_*/metrics.jsonl")):
        seed = int(path.parent.name.split("_", 1)[1])
        with open(path) as fh:
            out[seed] = [json.loads(line) for line in fh if line.strip()]
    return out


def write_rounds_csv(metrics: dict[int, list[dict]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUND_COLUMNS)
        for seed in sorted(metrics):
            for rec in metrics[seed]:
                w.writerow([seed] + [rec.get(c) for c in ROUND_COLUMNS[1:]])


def plot_learning_curves(metrics: dict[int, list[dict]], path, title: str | None = None,
                         threshold: float = 0.5):
    """Moving-average success against cumulative online samples, one line per seed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed in sorted(metrics):
        recs = metrics[seed]
        if not recs:
            continue
        x = [r["online_samples"] for r in recs]
        y = [r.get("moving_average", 0.0) for r in recs]
        ax.plot(x, y, lw=1.2, label=f"seed {seed}")
    ax.axhline(threshold, color="0.4", ls="--", lw=0.8)
    ax.set_xlabel("online samples")
    ax.set_ylabel("moving-average success")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    if metrics:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_returns(metrics: dict[int, list[dict]], path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed in sorted(metrics):
        recs = metrics[seed]
        ax.plot([r["t"] for r in recs], [r.get("mean_return", r.get("value_gap")) for r in recs],
                lw=1.0, label=f"seed {seed}")
    ax.set_xlabel("round")
    ax.set_ylabel("evaluation return")
    if metrics:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(run_dir, title: str | None = None) -> list[Path]:
    """Write ``rounds.csv``, ``learning_curve.png`` and ``returns.png`` into ``run_dir``."""
    run_dir = Path(run_dir)
    metrics = load_metrics(run_dir)
    outputs = [run_dir / "rounds.csv", run_dir / "learning_curve.png", run_dir / "returns.png"]
    write_rounds_csv(metrics, outputs[0])
    plot_learning_curves(metrics, outputs[1], title)
    plot_returns(metrics, outputs[2])
    return outputs
