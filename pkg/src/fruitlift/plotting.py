"""SVG figures for sweeps and loss logs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

AXIS_LABELS = {"D": "embedding dimension D", "tau": "temperature", "lambda_e": "Euclidean weight",
               "lambda_c": "cosine weight", "mask_noise": "mask drop / split probability"}


def plot_sweep(rows, axis, path, title=None):
    """Precision, recall and F1 against the swept value."""
    xs = [r["axis_value"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, style in (("f1", "o-"), ("precision", "s--"), ("recall", "^:")):
        ax.plot(xs, [r[key] for r in rows], style, label=key)
    if axis == "D" and xs and min(xs) > 0:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(AXIS_LABELS.get(axis, axis))
    ax.set_ylabel("score")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    ax.set_title(title or f"sweep over {AXIS_LABELS.get(axis, axis)}")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_loss_log(rows, path):
    """One panel per loss term against the global iteration index."""
    names = ("loss_photo", "loss_sem", "loss_contr")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    for j, (ax, name) in enumerate(zip(axes, names)):
        pts = [(i, r[2 + j]) for i, r in enumerate(rows) if r[2 + j] == r[2 + j]]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=0.6)
            if name != "loss_contr":
                ax.set_yscale("log")
        ax.set_title(name)
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
