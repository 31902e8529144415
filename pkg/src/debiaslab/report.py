"""Rendering of sweep plots, correlation tables, AUC tables and saliency
overlays to files (CSV + PNG)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bias import CorrelationReport
from .evaluation import SaliencyMap, SweepResult
from .manifest import ARTIFACT_NAMES

METHOD_COLORS = {
    "erm": "tab:blue",
    "groupdro": "tab:orange",
    "rsc": "tab:green",
}


def render_sweep_plot(result: SweepResult, path: str | Path) -> Path:
    """Trap-test AUC vs bias factor, one panel per test regime, with
    standard-error bands."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    aggregates = result.aggregates()
    regimes = sorted({r for (_, _, r) in aggregates})
    if not regimes:
        raise ValueError("sweep result has no cells to plot")
    fig, axes = plt.subplots(1, len(regimes), figsize=(5.5 * len(regimes), 4), squeeze=False)
    for ax, regime in zip(axes[0], regimes):
        methods = sorted({m for (_, m, r) in aggregates if r == regime})
        for method in methods:
            points = sorted(
                (f, v) for (f, m, r), v in aggregates.items() if m == method and r == regime
            )
            factors = [f for f, _ in points]
            means = np.array([v["mean"] for _, v in points])
            errs = np.array([v["stderr"] for _, v in points])
            color = METHOD_COLORS.get(method)
            ax.plot(factors, means, marker="o", label=method, color=color)
            ax.fill_between(factors, means - errs, means + errs, alpha=0.25, color=color)
        ax.set_xlabel("training bias factor")
        ax.set_ylabel("trap-test ROC AUC")
        ax.set_title(f"test regime: {regime}")
        ax.axhline(0.5, color="gray", lw=0.8, ls=":")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_sweep_csv(result: SweepResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["factor", "method", "regime", "mean_auc", "stderr", "n_seeds"])
        for (factor, method, regime), v in result.aggregates().items():
            writer.writerow([factor, method, regime, round(v["mean"], 6), round(v["stderr"], 6), v["n_seeds"]])
    return path


def render_correlation_table(report: CorrelationReport, csv_path: str | Path, png_path: str | Path | None = None) -> list[Path]:
    """CSV plus a colored table figure (green positive, red negative)."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    rows = report.to_rows()
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    written = [csv_path]
    if png_path is not None:
        png_path = Path(png_path)
        png_path.parent.mkdir(parents=True, exist_ok=True)
        header, body = rows[0], rows[1:]
        fig, ax = plt.subplots(figsize=(1.4 * len(header), 0.5 * (len(body) + 2)))
        ax.axis("off")
        cell_colors = []
        for row in body:
            colors = ["white", "white"]
            for value in row[2:]:
                if value == "":
                    colors.append("lightgray")
                else:
                    v = float(value)
                    intensity = min(abs(v), 1.0) * 0.6
                    colors.append((1 - intensity, 1.0, 1 - intensity) if v >= 0 else (1.0, 1 - intensity, 1 - intensity))
            cell_colors.append(colors)
        table = ax.table(cellText=[[str(c) for c in r] for r in body], colLabels=header,
                         cellColours=cell_colors, loc="center")
        table.auto_set_font_size(False)
        table.set_fontsize(8)
        fig.tight_layout()
        fig.savefig(png_path, dpi=150)
        plt.close(fig)
        written.append(png_path)
    return written


def render_auc_table(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Flat CSV of AUC results (method, regime, factor, auc, stderr)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("no AUC rows to render")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def render_saliency_overlays(
    images: Sequence[np.ndarray],
    maps: Sequence[SaliencyMap],
    correct: Sequence[bool],
    path: str | Path,
    labels: Sequence[str] | None = None,
) -> Path:
    """Saliency heatmaps over images; blue solid border = correct prediction,
    red dashed = wrong."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 3), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.imshow(images[i])
        ax.imshow(maps[i].grid, cmap="jet", alpha=0.45)
        ax.set_xticks([])
        ax.set_yticks([])
        if labels:
            ax.set_title(labels[i], fontsize=8)
        edge = "blue" if correct[i] else "red"
        style = "-" if correct[i] else "--"
        for spine in ax.spines.values():
            spine.set_edgecolor(edge)
            spine.set_linestyle(style)
            spine.set_linewidth(3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(
    out_dir: str | Path,
    sweep: SweepResult | None = None,
    correlations: CorrelationReport | None = None,
    saliency: Sequence[tuple[np.ndarray, SaliencyMap, bool]] | None = None,
) -> list[Path]:
    """Render whatever results are available; missing sections are omitted."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if sweep is not None and sweep.cells:
        written.append(render_sweep_plot(sweep, out / "sweep.png"))
        written.append(render_sweep_csv(sweep, out / "sweep.csv"))
    if correlations is not None:
        written.extend(
            render_correlation_table(correlations, out / "correlations.csv", out / "correlations.png")
        )
    if saliency:
        images, maps, correct = zip(*saliency)
        written.append(render_saliency_overlays(images, maps, correct, out / "saliency.png"))
    if not written:
        raise ValueError("no results supplied to render")
    return written
