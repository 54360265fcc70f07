"""Matplotlib rendering of funnel charts and simulation diagnostics.

Figures are written as SVG with a fixed hash salt and no date metadata so
that identical inputs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .funnelbench import Classification, FunnelChart  # noqa: E402

COLORS = {"Over": "#1b7837", "Target": "#4d4d4d", "Under": "#b2182b"}

RC = {
    "svg.hashsalt": "survfunnel",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def render_funnel_svg(chart: FunnelChart | dict, path) -> None:
    """Funnel plot: centers by classification, inner limits solid, outer dashed."""
    if isinstance(chart, dict):
        chart = FunnelChart.from_dict(chart)
    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots(figsize=(8.0, 4.4))
        for level, style in (("inner", "-"), ("outer", "--")):
            c = chart.curves[level]
            for side in ("lower", "upper"):
                (line,) = ax.plot(c["x"], c[side], style, color="#2166ac", lw=1.0)
                line.set_gid(f"limit-{level}-{side}")
        target = ax.axhline(chart.target, color="black", lw=0.8)
        target.set_gid("target-line")
        for pt in chart.points:
            (m,) = ax.plot(
                [pt["x"]], [pt["y"]], "o", ms=4, color=COLORS[pt["classification"]],
                markeredgewidth=0,
            )
            m.set_gid(f"center-{pt['center_id']}")
        handles = [
            plt.Line2D([], [], marker="o", ls="", color=COLORS[c.value],
                       label=f"{c.value} ({chart.counts.get(c.value, 0)})")
            for c in Classification
        ]
        handles.append(plt.Line2D([], [], ls="-", color="#2166ac",
                                  label=f"{1 - chart.alpha:.0%} limits"))
        handles.append(plt.Line2D([], [], ls="--", color="#2166ac",
                                  label=f"adjusted limits (alpha'={chart.alpha_prime:.2g})"))
        ax.legend(handles=handles, loc="upper left", bbox_to_anchor=(1.01, 1.0), frameon=False,
                  fontsize=8)
        ax.set_xlabel(chart.xlabel)
        ax.set_ylabel(chart.ylabel)
        if chart.title:
            ax.set_title(chart.title)
        ys = [pt["y"] for pt in chart.points]
        lo = min(min(ys), min(chart.curves["outer"]["lower"][-1], 0.0))
        hi = max(max(ys), chart.curves["outer"]["upper"][-1], 2.0)
        ax.set_ylim(max(lo - 0.1, -0.5), min(hi + 0.1, 4.0))
        fig.tight_layout()
        _save(fig, path)


def render_zscore_scatter(rows: Sequence[dict], path) -> None:
    """Funnel Z-scores against pseudo-observation Z-scores."""
    zf = np.array([r["Z_funnel"] for r in rows], dtype=float)
    zp = np.array([r["Z_pseudo"] for r in rows], dtype=float)
    keep = np.isfinite(zf) & np.isfinite(zp)
    with matplotlib.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.4, 4.4))
        ax.scatter(zf[keep], zp[keep], s=6, alpha=0.5, color="#4d4d4d", linewidths=0)
        lim = np.nanmax(np.abs(np.concatenate([zf[keep], zp[keep], [3.0]])))
        ax.plot([-lim, lim], [-lim, lim], color="#b2182b", lw=0.8)
        ax.set_xlabel("Funnel Z-score")
        ax.set_ylabel("Pseudo-observation Z-score")
        fig.tight_layout()
        _save(fig, path)


def render_zscore_vs_censoring(rows: Sequence[dict], path) -> None:
    """Z-scores of both methods against the center's censoring rate (log scale)."""
    rate = np.array([r["cens_rate"] for r in rows], dtype=float)
    with matplotlib.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.8), sharey=True)
        for ax, col, label in zip(axes, ("Z_funnel", "Z_pseudo"), ("Funnel", "Pseudo-observations")):
            z = np.array([r[col] for r in rows], dtype=float)
            keep = np.isfinite(z)
            ax.scatter(rate[keep], z[keep], s=6, alpha=0.5, color="#4d4d4d", linewidths=0)
            ax.set_xscale("log")
            for h in (-1.96, 1.96):
                ax.axhline(h, color="#2166ac", ls="--", lw=0.8)
            ax.set_xlabel("Censoring Weibull rate")
            ax.set_title(label)
        axes[0].set_ylabel("Z-score")
        fig.tight_layout()
        _save(fig, path)
