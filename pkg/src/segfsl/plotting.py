"""Report figures rendered straight to files (headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.dpi": 120, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9,
         "axes.spines.top": False, "axes.spines.right": False}


def _save(fig, path):
    # fixed metadata keeps PNG bytes stable across runs
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_psd_roc(roc, path, title=None):
    """Per-class PSD-ROC step curves plus the shaded mean-TPR curve."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for cls in roc.classes:
            xs, ys = roc.curves[cls]
            ax.step(np.r_[0.0, xs, roc.max_efpr], np.r_[0.0, ys, ys[-1] if len(ys) else 0.0],
                    where="post", lw=1, label=cls)
        mx, my = roc.mean_curve
        ax.step(mx, my, where="post", color="k", lw=2, label="mean_TPR")
        ax.fill_between(mx, my, step="post", color="k", alpha=0.08)
        ax.set_xlim(0, roc.max_efpr)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("eFPR (per hour)")
        ax.set_ylabel("TPR")
        ax.set_title(title or f"PSD-ROC, PSDS = {roc.psds:.4f}")
        ax.legend(loc="lower right", fontsize=8)
        _save(fig, path)


def plot_training_curves(log, path):
    """Mean episode loss and validation accuracy per epoch."""
    epochs = [r.epoch for r in log]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
        a1.plot(epochs, [r.mean_loss for r in log], marker="o", ms=3)
        a1.set_xlabel("epoch")
        a1.set_ylabel("training loss")
        a2.plot(epochs, [r.val_accuracy for r in log], marker="o", ms=3, color="tab:green")
        a2.set_xlabel("epoch")
        a2.set_ylabel("validation accuracy")
        a2.set_ylim(0, 1.02)
        fig.tight_layout()
        _save(fig, path)


def plot_operating_points(points, path):
    """F-measure over the threshold for each alpha of the sweep."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for alpha in sorted({p.alpha for p in points}):
            sel = sorted((p for p in points if p.alpha == alpha), key=lambda p: p.threshold)
            ax.plot([p.threshold for p in sel], [p.prf[2] for p in sel], lw=1, label=f"alpha={alpha:g}")
        ax.set_xlabel("threshold h")
        ax.set_ylabel("F-measure")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7, ncol=2)
        _save(fig, path)


def plot_track(track, truth, path, threshold=None):
    """Probability track of one file with its scored ground truth shaded."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(9, 2.5))
        for r in truth:
            ax.axvspan(r.onset, r.offset, color="tab:orange", alpha=0.25, lw=0)
        ax.plot(track.times(), track.values, lw=0.8)
        if threshold is not None:
            ax.axhline(threshold, color="k", ls="--", lw=0.8)
        ax.set_ylim(0, 1)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("p(positive)")
        _save(fig, path)
