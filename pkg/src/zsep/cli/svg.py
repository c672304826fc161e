"""Minimal deterministic SVG line plots (axes, ticks, one polyline per series)."""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_plot(x: Sequence[float], series: Mapping[str, Sequence[float]], title: str = "",
              xlabel: str = "", ylabel: str = "", width: int = 560, height: int = 360,
              normalize: bool = False) -> str:
    """Render ``series`` against ``x`` as an SVG document string.

    With ``normalize=True`` each series is min-max scaled to [0, 1] so metrics
    on different scales share one axis; the legend then lists each raw range.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("x must be a non-empty 1-D sequence")
    ys = {}
    legend = {}
    for name, y in series.items():
        y = np.asarray(y, dtype=np.float64)
        if y.shape != x.shape:
            raise ValueError(f"series {name!r} has {y.size} points, x has {x.size}")
        lo, hi = float(np.min(y)), float(np.max(y))
        if normalize:
            y = (y - lo) / (hi - lo) if hi > lo else np.full_like(y, 0.5)
            legend[name] = f"{name} [{lo:.4g}, {hi:.4g}]"
        else:
            legend[name] = name
        ys[name] = y
    all_y = np.concatenate(list(ys.values())) if ys else np.zeros(1)
    y_lo, y_hi = float(np.min(all_y)), float(np.max(all_y))
    if y_hi <= y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_lo, x_hi = float(x.min()), float(x.max())
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    left, right, top, bottom = 60, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom

    def px(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return top + (1.0 - (v - y_lo) / (y_hi - y_lo)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for v in np.linspace(x_lo, x_hi, 5):
        parts.append(f'<text x="{_fmt(px(v))}" y="{top + ph + 16}" text-anchor="middle" '
                     f'font-size="10">{v:.3g}</text>')
    for v in np.linspace(y_lo, y_hi, 5):
        parts.append(f'<text x="{left - 6}" y="{_fmt(py(v) + 3)}" text-anchor="end" '
                     f'font-size="10">{v:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" '
                 f'font-size="12">{escape(xlabel)}</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, y) in enumerate(ys.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x, y))
        parts.append(f'<polyline data-series="{escape(name)}" points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 14 * k
        parts.append(f'<text x="{left + pw - 4}" y="{ly}" text-anchor="end" font-size="10" '
                     f'fill="{color}">{escape(legend[name])}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
