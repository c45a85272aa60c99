"""Figures for evaluation and comparison reports.

Everything renders off-screen with the Agg backend and writes straight to
files next to the text reports.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(ncols=1, width=4.0, height=3.2):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _curve_xy(points):
    pts = sorted(
        ((p.recall, p.precision) for p in points if p.true_positives + p.false_positives > 0),
        key=lambda rp: (rp[0], -rp[1]),
    )
    return [r for r, _ in pts], [p for _, p in pts]


def plot_pr_curves(report, path):
    """Aggregate PR curve plus one faint curve per tile."""
    with plt.rc_context(STYLE):
        fig, (ax,) = _figure()
        for pts in report.curves.values():
            r, p = _curve_xy(pts)
            ax.plot(r, p, color="0.75", lw=0.7)
        if report.aggregate_curve:
            r, p = _curve_xy(report.aggregate_curve)
            ax.plot(r, p, color="C0", lw=1.6,
                    label=f"all tiles: F*={report.optimal_f:.3f}, AUC={report.auc:.3f}")
            ax.legend(loc="lower left")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(report.name)
        return _save(fig, path)


def plot_comparison(comparison, path):
    """Grouped bars of optimal F and PR-AUC per run."""
    names = [n for n, _ in comparison.runs]
    fs = [r.optimal_f for _, r in comparison.runs]
    aucs = [r.auc for _, r in comparison.runs]
    x = range(len(names))
    with plt.rc_context(STYLE):
        fig, (ax,) = _figure(width=max(4.0, 1.3 * len(names)))
        ax.bar([i - 0.2 for i in x], fs, width=0.4, label="optimal F")
        ax.bar([i + 0.2 for i in x], aucs, width=0.4, label="AUC-PR")
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, rotation=15, ha="right")
        ax.set_ylim(0, 1)
        ax.legend()
        return _save(fig, path)


def plot_maps(panels, path, title=None):
    """Side-by-side grayscale panels given as ``[(label, array), ...]``."""
    with plt.rc_context(STYLE):
        fig, axes = _figure(ncols=len(panels), width=2.6, height=2.8)
        for ax, (label, arr) in zip(axes, panels):
            ax.imshow(arr, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(label)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_training(report, path):
    epochs = [e.epoch for e in report.epochs]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = _figure(ncols=2)
        a1.plot(epochs, [e.loss for e in report.epochs], marker="o", ms=3)
        a1.set_xlabel("epoch")
        a1.set_ylabel("mean squared loss")
        a2.plot(epochs, [e.accuracy for e in report.epochs], marker="o", ms=3, color="C1")
        a2.set_xlabel("epoch")
        a2.set_ylabel("train accuracy")
        return _save(fig, path)
