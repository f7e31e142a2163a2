"""Matplotlib rendering of analysis results to image files.

Only the CLI report path calls into this module; the analysis computations
themselves stay plot-free. All figures are written with the Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import (
    HistogramReport,
    RegressionReport,
    SsmResidualReport,
    SweepRow,
    UniquenessReport,
)
from .relational import DistanceMatrix


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def regression_scatter(
    before: DistanceMatrix,
    after: DistanceMatrix,
    report: RegressionReport,
    path: str | Path,
) -> None:
    """Distance-after vs distance-before scatter with the fitted line."""
    x = before.condensed()
    y = after.condensed()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(x, y, s=4, alpha=0.25, linewidths=0, color="#1f77b4")
    xs = np.linspace(0.0, float(x.max()) if x.size else 1.0, 50)
    ax.plot(
        xs,
        report.alpha * xs + report.beta,
        color="#d62728",
        label=(
            f"fit: a={report.alpha:.3f}, b={report.beta:.3f}\n"
            f"R2={report.r_squared:.4f}, rho={report.spearman_rho:.4f}"
        ),
    )
    ax.set_xlabel("pair distance (before)")
    ax.set_ylabel("pair distance (after)")
    ax.legend(loc="upper left", fontsize=8)
    _save(fig, Path(path))


def residual_hist(hist: HistogramReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    widths = np.diff(hist.bin_edges)
    ax.bar(hist.bin_edges[:-1], hist.counts, width=widths, align="edge",
           color="#1f77b4", edgecolor="white")
    ax.set_xlabel("|d_after - d_before|")
    ax.set_ylabel("pair count")
    ax.set_title(f"mean={hist.mean:.4f}  std={hist.std:.4f}", fontsize=9)
    _save(fig, Path(path))


def ssm_panels(
    before: DistanceMatrix,
    after: DistanceMatrix,
    report: SsmResidualReport,
    path: str | Path,
) -> None:
    """Before/after self-similarity matrices and both residual maps."""
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.6))
    panels = [
        (before.values, "before"),
        (after.values, "after"),
        (report.raw, f"raw residual (mean {report.raw_mean:.4f})"),
        (report.adjusted, f"scale-adjusted (mean {report.adjusted_mean:.4f})"),
    ]
    for ax, (mat, title) in zip(axes, panels):
        im = ax.imshow(mat, cmap="viridis")
        ax.set_title(title, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, Path(path))


def uniqueness_hist(report: UniquenessReport, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    widths = np.diff(report.bin_edges)
    ax.bar(report.bin_edges[:-1], report.counts, width=widths, align="edge",
           color="#1f77b4", edgecolor="white")
    ax.axvline(report.expected_eta, color="#2ca02c", linestyle="--",
               label=f"null expectation {report.expected_eta:.4f}")
    ax.axvline(report.threshold, color="#d62728", linestyle=":",
               label=f"threshold {report.threshold:.3f}")
    ax.set_xlabel("inter-image overlap eta")
    ax.set_ylabel("image-pair count")
    ax.set_yscale("symlog")
    ax.legend(fontsize=8)
    _save(fig, Path(path))


def robustness_bars(rows: list[SweepRow], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(rows)), 3.8))
    labels = [r.attack for r in rows]
    ax.bar(range(len(rows)), [100.0 * r.tpr for r in rows], color="#1f77b4")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("TPR (%)")
    ax.set_ylim(0, 105)
    if rows:
        ax.set_title(
            f"threshold m={rows[0].threshold_m} ({rows[0].calib_mode}), n={rows[0].n}",
            fontsize=9,
        )
    _save(fig, Path(path))
