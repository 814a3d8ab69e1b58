"""Figures and aligned-text tables written next to the JSON outputs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def aligned_table(rows: list[dict], columns: list[str], floatfmt: str = "{:.4g}") -> str:
    def fmt(v):
        if isinstance(v, float):
            return "inf" if math.isinf(v) else floatfmt.format(v)
        if isinstance(v, (list, tuple)):
            return ",".join(str(x) for x in v)
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def plot_loss_curve(records: list[dict], path, x_key: str = "iter", title: str = "") -> Path:
    """Total loss (log scale) per iteration or epoch; stage boundaries as vertical lines."""
    path = Path(path)
    xs = [r[x_key] for r in records]
    ys = [r["total"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(xs, ys, lw=1.2)
    stages = [r.get("stage") for r in records]
    for i in range(1, len(stages)):
        if stages[i] != stages[i - 1]:
            ax.axvline(xs[i], color="gray", ls="--", lw=0.8)
    if ys and min(ys) > 0:
        ax.set_yscale("log")
    ax.set_xlabel(x_key)
    ax.set_ylabel("total loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(rows: list[dict], path, metric: str = "chamfer_median_x1e3") -> Path:
    path = Path(path)
    arms = [r["arm"] for r in rows]
    vals = [r[metric] for r in rows]
    finite = [v for v in vals if math.isfinite(v)]
    cap = max(finite) * 1.2 if finite else 1.0
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bars = ax.bar(arms, [v if math.isfinite(v) else cap for v in vals], color="#4c72b0")
    for b, v in zip(bars, vals):
        ax.annotate("inf" if not math.isfinite(v) else f"{v:.3g}", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_title("ablation arms")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
