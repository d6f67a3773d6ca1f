"""Minimal self-contained SVG line plots (log-scale y), no external renderer."""

from __future__ import annotations

import math

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 30, 50
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _log_ticks(lo, hi):
    lo_e = math.floor(math.log10(lo))
    hi_e = math.ceil(math.log10(hi))
    return [10.0**e for e in range(lo_e, hi_e + 1)]


def line_plot_svg(series, title, xlabel, ylabel, logy=True):
    """series: list of (label, xs, ys); non-positive ys are dropped on log
    plots.  Returns the SVG document as a string."""
    pts = []
    for _, xs, ys in series:
        for x, y in zip(xs, ys):
            if y is not None and (not logy or y > 0):
                pts.append((x, y))
    if not pts:
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}">'
            f'<text x="20" y="40">{title}: no data</text></svg>'
        )
    xs_all = [p[0] for p in pts]
    ys_all = [p[1] for p in pts]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1
    if logy:
        y0 = 10 ** math.floor(math.log10(y0))
        y1 = 10 ** math.ceil(math.log10(y1)) if y1 > y0 else y0 * 10

    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x):
        return _ML + (x - x0) / (x1 - x0) * pw

    def py(y):
        if logy:
            return _MT + (1 - (math.log10(y) - math.log10(y0)) /
                          (math.log10(y1) - math.log10(y0))) * ph
        return _MT + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W/2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    yticks = _log_ticks(y0, y1) if logy else [y0 + (y1 - y0) * k / 5 for k in range(6)]
    for t in yticks:
        if t < y0 * (1 - 1e-12) or t > y1 * (1 + 1e-12):
            continue
        y = py(t)
        out.append(
            f'<line x1="{_ML}" y1="{y:.1f}" x2="{_ML+pw}" y2="{y:.1f}" '
            f'stroke="#ddd"/>'
        )
        out.append(
            f'<text x="{_ML-6}" y="{y+4:.1f}" text-anchor="end">{t:.0e}</text>'
        )
    for k in range(6):
        xv = x0 + (x1 - x0) * k / 5
        x = px(xv)
        out.append(
            f'<text x="{x:.1f}" y="{_MT+ph+18}" text-anchor="middle">{xv:g}</text>'
        )
    for i, (label, xs, ys) in enumerate(series):
        col = _COLORS[i % len(_COLORS)]
        path = []
        for x, y in zip(xs, ys):
            if y is None or (logy and y <= 0):
                continue
            cmd = "M" if not path else "L"
            path.append(f"{cmd}{px(x):.1f},{py(y):.1f}")
        if path:
            out.append(
                f'<path d="{" ".join(path)}" fill="none" stroke="{col}" '
                f'stroke-width="1.5"/>'
            )
        ly = _MT + 16 + 16 * i
        out.append(
            f'<line x1="{_ML+pw-130}" y1="{ly-4}" x2="{_ML+pw-105}" y2="{ly-4}" '
            f'stroke="{col}" stroke-width="2"/>'
        )
        out.append(f'<text x="{_ML+pw-100}" y="{ly}">{label}</text>')
    out.append(
        f'<text x="{_W/2}" y="{_H-12}" text-anchor="middle">{xlabel}</text>'
    )
    out.append(
        f'<text x="16" y="{_MT+ph/2}" transform="rotate(-90 16 {_MT+ph/2})" '
        f'text-anchor="middle">{ylabel}</text>'
    )
    out.append("</svg>")
    return "\n".join(out)
