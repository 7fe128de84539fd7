"""Tiny hand-rolled SVG line plots; no plotting dependency."""

from __future__ import annotations

import math

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 40, 50


def _ticks(lo, hi, n=5):
    if lo == hi:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def line_plot(path, series, title="", xlabel="", ylabel="", logx=False, logy=False):
    """series: {label: [(x, y), ...]}. Writes a standalone SVG file."""
    fx = math.log10 if logx else float
    fy = math.log10 if logy else float
    pts = {lab: [(fx(x), fy(y)) for x, y in xy] for lab, xy in series.items() if xy}
    xs = [x for xy in pts.values() for x, _ in xy]
    ys = [y for xy in pts.values() for _, y in xy]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5

    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def sx(x):
        return _ML + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return _MT + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="12">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" y2="{_MT + ph}" stroke="black"/>',
           f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" stroke="black"/>']

    for tx in _ticks(x0, x1):
        lbl = f"{10 ** tx:.3g}" if logx else f"{tx:.3g}"
        out.append(f'<line x1="{sx(tx)}" y1="{_MT + ph}" x2="{sx(tx)}" y2="{_MT + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(tx)}" y="{_MT + ph + 20}" text-anchor="middle">{lbl}</text>')
    for ty in _ticks(y0, y1):
        lbl = f"{10 ** ty:.3g}" if logy else f"{ty:.3g}"
        out.append(f'<line x1="{_ML - 5}" y1="{sy(ty)}" x2="{_ML}" y2="{sy(ty)}" stroke="black"/>')
        out.append(f'<text x="{_ML - 8}" y="{sy(ty) + 4}" text-anchor="end">{lbl}</text>')

    out.append(f'<text x="{_ML + pw / 2}" y="{_H - 12}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="16" y="{_MT + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {_MT + ph / 2})">{ylabel}</text>')

    for i, (lab, xy) in enumerate(pts.items()):
        col = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in xy)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        for x, y in xy:
            out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="{col}"/>')
        out.append(f'<text x="{_ML + pw - 6}" y="{_MT + 16 + 16 * i}" text-anchor="end" '
                   f'fill="{col}">{lab}</text>')

    out.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(out))
