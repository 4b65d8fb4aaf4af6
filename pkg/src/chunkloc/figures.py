"""Matplotlib rendering for the report path: localization heatmap panels,
training curves and run-summary bars, written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .localization import LocalizationReport


def render_localization_panels(
    report: LocalizationReport, conv_spec, out_path: str | Path, kind: str
) -> Path:
    """One panel per embedding region: channels (y) x latent units (x), cell
    value = mean pair score of that region/channel/unit for the given kind."""
    gh, gw = conv_spec.grid
    n_regions = conv_spec.n_regions
    grid = np.full((n_regions, conv_spec.channels, 5), np.nan)
    for s in report.scores:
        if s.pair_kind != kind:
            continue
        cell = grid[s.region, s.channel, s.latent_unit]
        grid[s.region, s.channel, s.latent_unit] = s.score if np.isnan(cell) else max(cell, s.score)

    fig, axes = plt.subplots(gh, gw, figsize=(3.2 * gw, 2.6 * gh), constrained_layout=True)
    axes = np.atleast_2d(axes)
    for region in range(n_regions):
        gi, gj = divmod(region, gw)
        ax = axes[gi][gj]
        data = grid[region]
        masked = np.ma.masked_invalid(data)
        im = ax.imshow(masked, aspect="auto", vmin=0.0, vmax=1.0, cmap="viridis")
        rows, cols = report.region_shapes[region]
        ax.set_title(f"region {region} ({rows}x{cols})", fontsize=9)
        ax.set_xlabel("latent unit", fontsize=8)
        ax.set_ylabel("channel", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8, label="max pair score")
    fig.suptitle(f"distribution distance per node, {kind} pairs", fontsize=11)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_loss_curves(curves: dict[str, list[float]], out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5), constrained_layout=True)
    for label, values in curves.items():
        ax.plot(range(1, len(values) + 1), values, label=label, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def render_metric_bars(rows: list[dict], out_path: str | Path, metric: str = "macro_f1") -> Path:
    """Grouped mean/std bars, one bar per (label) row with an error whisker."""
    labels = [r["label"] for r in rows]
    means = [r["mean"] for r in rows]
    stds = [r["std"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 3.6), constrained_layout=True)
    x = np.arange(len(rows))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4878a8")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(metric)
    ax.grid(axis="y", alpha=0.3)
    for xi, (m, s) in enumerate(zip(means, stds)):
        ax.text(xi, min(m + s + 0.03, 1.02), f"{m:.3f}", ha="center", fontsize=8)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
