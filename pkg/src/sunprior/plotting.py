"""Figures for evaluation reports, rendered straight to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "savefig.dpi": 150,
}


def contact_sheet(path, images_by_condition, per_row=8, title=None):
    """One row of sample images per condition, labelled by its normalized altitude."""
    conds = list(images_by_condition)
    n = min(per_row, min(len(images_by_condition[c]) for c in conds))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(conds), n, figsize=(0.8 * n + 0.6, 0.85 * len(conds) + 0.3), squeeze=False)
        for r, c in enumerate(conds):
            for k in range(n):
                ax = axes[r, k]
                ax.imshow(images_by_condition[c][k], cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
            axes[r, 0].set_ylabel(f"{c:.2f}")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def sweep_curves(path, report):
    """Luminance and estimated noise against normalized altitude, generated vs ground truth."""
    v = np.array([r["normalized"] for r in report.rows])
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.0, 2.4))
        ax1.plot(v, [r["luminance"] for r in report.rows], "o-", label="generated")
        ax1.plot(v, [r["luminance_gt"] for r in report.rows], "s--", label="ground truth")
        ax1.set_xlabel("normalized altitude")
        ax1.set_ylabel("mean luminance")
        ax1.legend(frameon=False)
        ax2.plot(v, [r["sigma"] for r in report.rows], "o-", label="generated")
        ax2.plot(v, [r["sigma_gt"] for r in report.rows], "s--", label="ground truth")
        ax2.set_xlabel("normalized altitude")
        ax2.set_ylabel("estimated noise sigma")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
