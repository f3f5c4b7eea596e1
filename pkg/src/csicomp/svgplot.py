"""Dependency-free SVG line charts for sweep results.

Each data point is emitted as a <circle> carrying data-series/data-x/data-y
attributes with the raw values, so tests (and tools) can recover the
plotted numbers exactly from the SVG text.
"""

from __future__ import annotations

import math

_WIDTH, _HEIGHT = 640, 440
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 150, 40, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def render_line_chart(series: dict[str, list[tuple[float, float]]],
                      title: str, xlabel: str, ylabel: str) -> str:
    """series: label -> [(x, y), ...]; returns a standalone SVG document."""
    pts = [(x, y) for rows in series.values() for x, y in rows
           if math.isfinite(x) and math.isfinite(y)]
    if not pts:
        raise ValueError("render_line_chart: no finite points to plot")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def px(x: float) -> float:
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return _MARGIN_T + (y_hi - y) / (y_hi - y_lo) * plot_h

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
           f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">',
           f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
           f'<text x="{_WIDTH // 2}" y="20" text-anchor="middle" '
           f'font-size="14" font-family="sans-serif">{title}</text>']
    axis_y = _MARGIN_T + plot_h
    out.append(f'<line x1="{_MARGIN_L}" y1="{axis_y}" x2="{_MARGIN_L + plot_w}" '
               f'y2="{axis_y}" stroke="black"/>')
    out.append(f'<line x1="{_MARGIN_L}" y1="{_MARGIN_T}" x2="{_MARGIN_L}" '
               f'y2="{axis_y}" stroke="black"/>')
    for tx in _ticks(x_lo, x_hi):
        out.append(f'<line x1="{px(tx):.1f}" y1="{axis_y}" x2="{px(tx):.1f}" '
                   f'y2="{axis_y + 5}" stroke="black"/>')
        out.append(f'<text x="{px(tx):.1f}" y="{axis_y + 18}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif">{tx:g}</text>')
    for ty in _ticks(y_lo, y_hi):
        out.append(f'<line x1="{_MARGIN_L - 5}" y1="{py(ty):.1f}" x2="{_MARGIN_L}" '
                   f'y2="{py(ty):.1f}" stroke="black"/>')
        out.append(f'<text x="{_MARGIN_L - 8}" y="{py(ty):.1f}" text-anchor="end" '
                   f'font-size="11" font-family="sans-serif">{ty:.3g}</text>')
    out.append(f'<text x="{_MARGIN_L + plot_w // 2}" y="{_HEIGHT - 10}" '
               f'text-anchor="middle" font-size="12" '
               f'font-family="sans-serif">{xlabel}</text>')
    out.append(f'<text x="18" y="{_MARGIN_T + plot_h // 2}" text-anchor="middle" '
               f'font-size="12" font-family="sans-serif" '
               f'transform="rotate(-90 18 {_MARGIN_T + plot_h // 2})">{ylabel}</text>')
    for i, (label, rows) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        finite = [(x, y) for x, y in rows if math.isfinite(x) and math.isfinite(y)]
        if not finite:
            continue
        path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in finite)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{path}"/>')
        for x, y in finite:
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" '
                       f'fill="{color}" data-series="{label}" '
                       f'data-x="{x!r}" data-y="{y!r}"/>')
        ly = _MARGIN_T + 14 + i * 16
        lx = _MARGIN_L + plot_w + 10
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{lx + 22}" y="{ly}" font-size="11" '
                   f'font-family="sans-serif">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def extract_points(svg_text: str) -> list[tuple[str, float, float]]:
    """Recover (series, x, y) triples from a rendered chart."""
    import re

    pat = re.compile(r'data-series="([^"]+)" data-x="([^"]+)" data-y="([^"]+)"')
    return [(m.group(1), float(m.group(2)), float(m.group(3)))
            for m in pat.finditer(svg_text)]
