"""Report figures, written as SVG.

SVG output is made byte-reproducible by fixing the id hash salt and
dropping the creation date.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "brainrefine",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
COLORS = {"vanilla": "#7f7f7f", "refined": "#1f77b4", "Q": "#2ca02c", "K": "#d62728", "V": "#9467bd"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_layer_pcc(vanilla, refined, path, title="Held-out encoding PCC by layer"):
    """Grouped bars of per-layer mean PCC for the two backbones."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        x = np.arange(len(vanilla))
        ax.bar(x - 0.2, vanilla, 0.4, label="vanilla", color=COLORS["vanilla"])
        ax.bar(x + 0.2, refined, 0.4, label="refined", color=COLORS["refined"])
        ax.set_xticks(x)
        ax.set_xlabel("layer")
        ax.set_ylabel("mean PCC")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_param_changes(rows, path, kind="bias"):
    """Per-layer change percentages of Q/K/V parameters of one kind (weight or bias)."""
    rows = [r for r in rows if r["kind"] == kind]
    layers = sorted({r["layer"] for r in rows})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for i, p in enumerate("QKV"):
            vals = [next((r["pct"] for r in rows if r["layer"] == l and r["param_type"] == p), np.nan)
                    for l in layers]
            ax.bar(np.arange(len(layers)) + (i - 1) * 0.27, vals, 0.27, label=p, color=COLORS[p])
        ax.set_xticks(np.arange(len(layers)), [str(l) for l in layers])
        ax.set_xlabel("transformer layer")
        ax.set_ylabel(f"{kind} change (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_sweep(rows, path, metric="head_test_pcc"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot([r["n"] for r in rows], [r[metric] for r in rows], marker="o", color=COLORS["refined"])
        ax.set_xticks([r["n"] for r in rows], [r["label"] for r in rows])
        ax.set_xlabel("context length n (TRs)")
        ax.set_ylabel(metric.replace("_", " "))
        return _save(fig, path)


def plot_change_rates(rates: dict, path):
    """One line per task of per-layer weight change rates."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for task, r in rates.items():
            ax.plot(np.arange(len(r)), r, marker="o", label=task)
        ax.axhline(0, color="black", lw=0.6)
        ax.set_xlabel("layer")
        ax.set_ylabel("weight change rate")
        ax.legend(frameon=False)
        return _save(fig, path)
