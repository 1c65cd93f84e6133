"""Learning-curve SVG without a plotting library.

Output bytes depend only on the input numbers, which keeps golden files stable.
"""
from __future__ import annotations

from html import escape

import numpy as np

from .harness import aggregate_runs, detect_asymptote

WIDTH, HEIGHT = 720, 420
MARGIN = dict(left=70, right=160, top=30, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def series_summary(logs, window: int = 20, threshold: float | None = None):
    """Mean curve, 95% half-width (None for one run) and asymptote report of one series."""
    if len(logs) == 1:
        ts = np.array([r.timestep for r in logs[0]])
        mean = np.array([r.mean_return for r in logs[0]])
        half = None
    else:
        ts, mean, half = aggregate_runs(logs)
    report = None
    if len(mean) >= 2:
        report = detect_asymptote(mean, window=min(window, len(mean)), threshold=threshold, timesteps=ts)
    return ts, mean, half, report


def learning_curve_svg(series: dict, window: int = 20, threshold: float | None = None,
                       title: str = "") -> str:
    """``series`` maps a label to a list of eval logs (one per seed)."""
    if not series:
        raise ValueError("nothing to plot")
    prepared = {label: series_summary(logs, window, threshold) for label, logs in series.items()}
    xs = np.concatenate([p[0] for p in prepared.values()])
    lows = [p[1] - (p[2] if p[2] is not None else 0) for p in prepared.values()]
    highs = [p[1] + (p[2] if p[2] is not None else 0) for p in prepared.values()]
    ymin = float(min(np.min(v) for v in lows))
    ymax = float(max(np.max(v) for v in highs))
    if ymax == ymin:
        ymin, ymax = ymin - 1.0, ymax + 1.0
    xmin, xmax = float(xs.min()), float(xs.max())
    if xmax == xmin:
        xmax = xmin + 1.0
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def px(x):
        return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0)

    def py(y):
        return y0 - (y - ymin) / (ymax - ymin) * (y0 - y1)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{(x0 + x1) / 2:.2f}" y="18" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for i in range(5):
        xv = xmin + (xmax - xmin) * i / 4
        yv = ymin + (ymax - ymin) * i / 4
        out.append(f'<text x="{_fmt(px(xv))}" y="{y0 + 16}" text-anchor="middle">{xv:.0f}</text>')
        out.append(f'<text x="{x0 - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">timesteps</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2:.2f})">average return</text>')

    for k, (label, (ts, mean, half, report)) in enumerate(prepared.items()):
        color = COLORS[k % len(COLORS)]
        out.append(f'<g class="series" data-label="{escape(label)}">')
        if half is not None:
            upper = [f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(ts, mean + half)]
            lower = [f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(ts[::-1], (mean - half)[::-1])]
            out.append(f'<polygon class="ci" points="{" ".join(upper + lower)}" '
                       f'fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(ts, mean))
        out.append(f'<polyline class="mean" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if report is not None:
            ya = _fmt(py(report.asymptotic_value))
            out.append(f'<line class="asymptote" x1="{x0}" y1="{ya}" x2="{x1}" y2="{ya}" stroke="{color}" '
                       f'stroke-dasharray="6,4" data-value="{report.asymptotic_value!r}"/>')
        ly = y1 + 18 * k + 10
        out.append(f'<line x1="{x1 + 12}" y1="{ly}" x2="{x1 + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 38}" y="{ly + 4}">{escape(label)}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
