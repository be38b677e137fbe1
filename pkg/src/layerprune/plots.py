"""Matplotlib figure rendering for report outputs.

Every CLI report path that writes a CSV also renders the matching figure
next to it. Rendering runs headless (Agg) with fixed metadata so repeated
runs produce stable files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams.update({
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
})

_PNG_METADATA = {"Software": "layerprune"}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_loss_curve(curve, path) -> None:
    """Training loss per step."""
    fig, ax = plt.subplots()
    steps = [s for s, _ in curve]
    losses = [l for _, l in curve]
    ax.plot(steps, losses, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss (nats)")
    ax.set_title("toy model training")
    _save(fig, path)


def plot_scores(history, path) -> None:
    """Per-layer importance scores for each pruning round."""
    fig, ax = plt.subplots()
    for step in history:
        layers = sorted(step.scores)
        ax.plot(layers, [step.scores[i] for i in layers],
                marker="o", ms=3, lw=1.0,
                label=f"round {step.step} (removed {','.join(map(str, step.removed))})")
    ax.set_xlabel("original layer index")
    ax.set_ylabel("importance score")
    ax.set_title("layer importance by pruning round")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_drift(report, path, selected=()) -> None:
    """Per-retained-layer mean drift, highlighting the compensation targets."""
    fig, ax = plt.subplots()
    layers = sorted(report.deltas)
    values = [report.deltas[i] for i in layers]
    colors = ["#d62728" if i in selected else "#1f77b4" for i in layers]
    ax.bar([str(i) for i in layers], values, color=colors)
    ax.set_xlabel("original layer index")
    ax.set_ylabel("mean activation drift")
    title = "first-order drift after pruning"
    if selected:
        title += f" (compensating {','.join(map(str, selected))})"
    ax.set_title(title)
    _save(fig, path)


def plot_objective_curve(curve, path) -> None:
    """Iterative solver objective trace (total, mse, regularizer)."""
    fig, ax = plt.subplots()
    steps = [c[0] for c in curve]
    ax.plot(steps, [c[1] for c in curve], label="total", lw=1.2)
    ax.plot(steps, [c[2] for c in curve], label="reconstruction", lw=1.0)
    ax.plot(steps, [c[3] for c in curve], label="identity anchor", lw=1.0)
    ax.set_xlabel("solver step")
    ax.set_ylabel("objective")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("compensation objective")
    _save(fig, path)


def plot_comparison(summary, path) -> None:
    """Median held-out perplexity per grid cell."""
    fig, ax = plt.subplots(figsize=(7.2, 4.0))
    cells = [row["cell"] for row in summary]
    ppls = [row["median_perplexity"] for row in summary]
    ax.barh(cells, ppls, color="#1f77b4")
    ax.set_xlabel("median held-out perplexity")
    ax.set_title("pruning configuration comparison")
    ax.invert_yaxis()
    _save(fig, path)
