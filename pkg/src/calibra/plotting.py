"""Figures for the CLI reports, rendered off-screen with the Agg backend."""

from __future__ import annotations

import io
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

from matplotlib.backends.backend_agg import FigureCanvasAgg  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

_STYLE = {
    "font.size": 8,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.2,
    "legend.fontsize": 7,
    "svg.hashsalt": "calibra",
}


def _new_figure(width: float = 4.5, height: float = 3.0) -> Figure:
    fig = Figure(figsize=(width, height), dpi=120)
    FigureCanvasAgg(fig)
    return fig


def _png(fig: Figure) -> bytes:
    buf = io.BytesIO()
    # Dropping the Software tag keeps bytes identical across matplotlib builds of one version.
    fig.savefig(buf, format="png", metadata={"Software": None}, bbox_inches="tight")
    return buf.getvalue()


def line_figure(
    series: Mapping[str, Sequence[tuple[float, float]]],
    xlabel: str,
    ylabel: str,
    title: str = "",
    hlines: Mapping[str, float] | None = None,
    logx: bool = False,
) -> bytes:
    """Line plot of named ``(x, y)`` series with optional horizontal references."""
    with matplotlib.rc_context(_STYLE):
        fig = _new_figure()
        ax = fig.add_subplot(1, 1, 1)
        for name in sorted(series):
            pts = sorted(series[name])
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", markersize=3, label=name)
        for name, y in sorted((hlines or {}).items()):
            ax.axhline(y, linestyle="--", color="0.4", linewidth=0.8, label=name)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _png(fig)


def bar_figure(labels: Sequence[str], values: Sequence[float], ylabel: str, title: str = "", limit: float | None = None) -> bytes:
    with matplotlib.rc_context(_STYLE):
        fig = _new_figure(max(4.5, 0.25 * len(labels)), 3.0)
        ax = fig.add_subplot(1, 1, 1)
        ax.bar(range(len(values)), values, color="#4c72b0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=90)
        if limit is not None:
            ax.axhline(limit, linestyle="--", color="#c44e52", linewidth=0.8)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _png(fig)
