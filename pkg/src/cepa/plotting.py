"""Deterministic SVG bar charts: one bar per putative target class."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
from matplotlib.backends.backend_svg import FigureCanvasSVG  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

_RC = {
    "svg.hashsalt": "cepa",
    "svg.fonttype": "none",
    "svg.id": "cepa-chart",
    "font.family": "DejaVu Sans",
    "font.size": 9.0,
}

CANVAS = (4.8, 3.2)
BASE_COLOR = "#7f8c9a"
HIGHLIGHT_COLOR = "#c0392b"


def bar_chart(path, values, title, ylabel, highlight=()):
    """Write an SVG bar chart of ``values`` ({class: value}) to ``path``.

    Bars get the gid ``bar-<class>`` so heights can be read back from the
    file. Non-finite values are drawn as empty bars labeled with their value.
    Classes in ``highlight`` are colored differently.
    """
    classes = sorted(values)
    heights = [float(values[c]) for c in classes]
    highlight = set(highlight)
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=CANVAS, dpi=100)
        FigureCanvasSVG(fig)
        ax = fig.add_subplot(1, 1, 1)
        finite = [h if math.isfinite(h) else 0.0 for h in heights]
        colors = [HIGHLIGHT_COLOR if c in highlight else BASE_COLOR for c in classes]
        bars = ax.bar(range(len(classes)), finite, color=colors, width=0.7)
        for c, bar, h in zip(classes, bars, heights):
            bar.set_gid(f"bar-{c}")
            if not math.isfinite(h):
                ax.annotate(str(h), (bar.get_x() + bar.get_width() / 2, 0.0), ha="center", va="bottom")
        ax.set_xticks(range(len(classes)))
        ax.set_xticklabels([str(c) for c in classes])
        ax.set_xlabel("putative target class")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    return path


def layer_charts(report, fig_dir):
    """Two charts per scanned layer: consensus (sigma/||mu||) and ||mu||."""
    paths = []
    for layer, tab in sorted(report.tables.items()):
        hit = [t for t, l in report.detected.items() if l == layer]
        paths.append(bar_chart(os.path.join(fig_dir, f"layer{layer}_consensus.svg"), tab.consensus,
                               f"layer {layer}: consensus", "sigma / ||mu||", hit))
        paths.append(bar_chart(os.path.join(fig_dir, f"layer{layer}_mu_norm.svg"), tab.mu_norm,
                               f"layer {layer}: ||mu||", "||mu||", hit))
    return paths


def cosine_charts(cos_sims, fig_dir, highlight=()):
    """``cos_sims`` maps layer -> {class: mean pairwise cosine similarity}."""
    return [
        bar_chart(os.path.join(fig_dir, f"layer{layer}_cos_sim.svg"), vals,
                  f"layer {layer}: mean pairwise cosine similarity", "cosine similarity", highlight)
        for layer, vals in sorted(cos_sims.items())
    ]
