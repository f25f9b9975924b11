"""Figures written next to the CSV outputs of the CLI."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

# keeps PNG bytes independent of the matplotlib version
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_pd_fa_curve(curves, path):
    """``curves`` maps a label to a list of CurvePoint; Fa on a x1e-6 axis."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        for label, points in curves.items():
            fa = [p.fa * 1e6 for p in points]
            pd = [p.pd for p in points]
            ax.plot(fa, pd, marker="o", ms=2.5, lw=1.2, label=label)
        ax.set_xlabel(r"$F_a$ ($\times 10^{-6}$)")
        ax.set_ylabel(r"$P_d$")
        ax.set_ylim(-0.02, 1.02)
        if len(curves) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_training_log(records, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        epochs = [r.epoch for r in records]
        ax.plot(epochs, [r.train_loss for r in records], lw=1.2, color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train BCE", color="C0")
        ax.set_yscale("log")
        val = np.array([r.val_iou for r in records], dtype=float)
        if np.isfinite(val).any():
            ax2 = ax.twinx()
            ax2.plot(epochs, val, lw=1.2, color="C1")
            ax2.set_ylabel("val IoU", color="C1")
            ax2.set_ylim(0, 1)
        return _save(fig, path)


_STATS_TITLES = {
    "high_response_ratio": "high-response pixels / frame",
    "target_ratio": "target pixels / frame",
    "targets_per_frame": "targets per frame",
}


def plot_dataset_stats(stats, path):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9.5, 2.8))
        for ax, hist in zip(axes, stats.histograms):
            lo, hi = hist.edges[:-1], hist.edges[1:]
            if hist.name == "targets_per_frame":
                ax.bar(lo, hist.mass * 100, width=0.8, align="edge", color="0.35")
            else:
                ax.bar(lo, hist.mass * 100, width=hi - lo, align="edge", color="0.35", edgecolor="w")
                ax.set_xscale("log")
            ax.set_title(_STATS_TITLES.get(hist.name, hist.name))
            ax.set_ylabel("% of total")
        return _save(fig, path)


def plot_hint_panels(image, prior, path):
    """Image next to its mean- and max-residual channels."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(8, 2.9))
        panels = [(image, "image"), (prior[0], "pixel - window mean"), (prior[1], "pixel - window max")]
        for ax, (arr, title) in zip(axes, panels):
            im = ax.imshow(arr, cmap="inferno", interpolation="nearest")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03)
        return _save(fig, path)
