"""Deterministic SVG figures for weight trajectories and scan tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# SVG output is measured in points (72 per inch); this gives an 800x500 viewBox.
WIDTH_PX, HEIGHT_PX, DPI = 800, 500, 72
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

RC = {
    "svg.hashsalt": "scalebio",
    "svg.fonttype": "path",
    "font.family": "DejaVu Sans",
    "font.size": 11,
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.8,
    "path.simplify": False,
}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def emit_weight_plot(record, path, labels=None, title=None) -> Path:
    """Plot ``p_i`` against step, one polyline per source.

    Identical records give byte-identical files.  Each line carries the SVG
    id ``weight-source-<i>``.
    """
    if not getattr(record, "with_mixture", False):
        raise ValueError("record has no mixture-weight (p) columns")
    if len(record) == 0:
        raise ValueError("record is empty")
    steps = record.column("step")
    p = record.column("p")
    labels = labels or [f"source {i}" for i in range(p.shape[1])]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(WIDTH_PX / DPI, HEIGHT_PX / DPI), dpi=DPI)
        for i in range(p.shape[1]):
            (line,) = ax.plot(steps, p[:, i], label=labels[i], color=COLORS[i % len(COLORS)])
            line.set_gid(f"weight-source-{i}")
        ax.set_xlabel("step")
        ax.set_ylabel("weight")
        ax.set_ylim(-0.02, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path)


def emit_scan_plot(rows, path, xkey, ykeys, xlabel, ylabel, title=None) -> Path:
    """Log-log plot of ``rows[ykey]`` against ``rows[xkey]``."""
    if not rows:
        raise ValueError("no rows to plot")
    x = np.array([r[xkey] for r in rows], dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(WIDTH_PX / DPI, HEIGHT_PX / DPI), dpi=DPI)
        for i, key in enumerate(ykeys):
            y = np.array([r[key] for r in rows], dtype=float)
            (line,) = ax.loglog(x, y, marker="o", label=key, color=COLORS[i % len(COLORS)])
            line.set_gid(f"series-{key}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path)


def emit_histogram(groups, path, xlabel, title=None, bins=40) -> Path:
    """Overlaid histograms of ``{label: values}`` on shared bins in [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(WIDTH_PX / DPI, HEIGHT_PX / DPI), dpi=DPI)
        for i, (label, values) in enumerate(groups.items()):
            ax.hist(np.asarray(values, dtype=float), bins=edges, alpha=0.55, label=label,
                    color=COLORS[i % len(COLORS)], gid=f"hist-{i}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path)
