"""Figures written next to the CSV outputs of ``train`` and ``eval``."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _per_step(rows: list[dict], key: str) -> tuple[np.ndarray, np.ndarray]:
    acc = defaultdict(list)
    for r in rows:
        acc[r["step"]].append(r[key])
    steps = np.array(sorted(acc))
    return steps, np.array([np.mean(acc[s]) for s in steps])


def plot_training_curves(rows: list[dict], path) -> None:
    """Episode-averaged losses and gradient norms against the step index."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_grad) = plt.subplots(1, 2, figsize=(9, 3.4))
        for key in ("L_S", "L_T", "L_hp", "L_cls", "L_da"):
            if rows:
                ax_loss.plot(*_per_step(rows, key), label=key, lw=1)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.set_yscale("symlog", linthresh=1e-2)
        ax_loss.legend(ncol=2)
        for key in ("grad_norm", "meta_grad_norm"):
            if rows:
                ax_grad.plot(*_per_step(rows, key), label=key, lw=1)
        ax_grad.set_xlabel("step")
        ax_grad.set_yscale("log")
        ax_grad.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_roc(report, path, title: str = "") -> None:
    """ROC on a log FAR axis with the reported operating points marked."""
    if report.roc is None:
        return
    fpr, tpr = report.roc
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        keep = fpr > 0
        ax.plot(fpr[keep], tpr[keep], lw=1.2, color="C0")
        for far, vr in sorted(report.vr_at_far.items()):
            ax.plot([far], [vr], "o", ms=4, color="C3")
            ax.annotate(f"{vr:.3f}", (far, vr), textcoords="offset points", xytext=(4, -10), fontsize=8)
        ax.set_xscale("log")
        ax.set_xlabel("false accept rate")
        ax.set_ylabel("verification rate")
        ax.set_ylim(0, 1.02)
        ax.set_title(title or f"rank-1 {report.rank1:.3f}, AUC {report.auc:.3f}")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
