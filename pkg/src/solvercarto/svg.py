"""Dependency-free SVG scatter plots and heatmaps."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
# a few stops of a perceptually ordered blue-to-yellow ramp
RAMP = ((0.267, 0.005, 0.329), (0.229, 0.322, 0.546), (0.128, 0.567, 0.551), (0.369, 0.789, 0.383),
        (0.993, 0.906, 0.144))
MISSING = "#dddddd"


def ramp_color(u: float) -> str:
    if not np.isfinite(u):
        return MISSING
    u = min(max(float(u), 0.0), 1.0) * (len(RAMP) - 1)
    i = min(int(u), len(RAMP) - 2)
    f = u - i
    rgb = [RAMP[i][c] * (1 - f) + RAMP[i + 1][c] * f for c in range(3)]
    return "#" + "".join(f"{int(round(255 * v)):02x}" for v in rgb)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _frame(width, height, title, body, xlabel="", ylabel=""):
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if xlabel:
        head.append(f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        head.append(f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" '
                    f'transform="rotate(-90 14 {height / 2:.1f})">{escape(ylabel)}</text>')
    return "\n".join(head + body + ["</svg>\n"])


def scatter(points, path=None, *, categories=None, category_names=None, values=None, title="",
            xlabel="", ylabel="", width=640, height=520, radius=2.5) -> str:
    """Scatter of 2-D points coloured by category index or by a continuous value."""
    p = np.asarray(points, dtype=float)
    left, right, top, bottom = 60, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    lo, hi = p.min(axis=0), p.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def sx(v):
        return left + (v - lo[0]) / span[0] * pw

    def sy(v):
        return top + ph - (v - lo[1]) / span[1] * ph

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    if values is not None:
        v = np.asarray(values, dtype=float)
        vlo, vhi = np.nanmin(v), np.nanmax(v)
        vs = (v - vlo) / (vhi - vlo) if vhi > vlo else np.zeros_like(v)
        colors = [ramp_color(u) for u in vs]
    elif categories is not None:
        colors = [PALETTE[int(c) % len(PALETTE)] for c in categories]
    else:
        colors = [PALETTE[0]] * len(p)
    for (x, y), c in zip(p, colors):
        body.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="{radius}" fill="{c}" fill-opacity="0.75"/>')
    for i, (v, anchor, xx, yy) in enumerate([(lo[0], "start", left, top + ph + 15), (hi[0], "end", left + pw, top + ph + 15)]):
        body.append(f'<text x="{xx}" y="{yy}" text-anchor="{anchor}">{v:.3g}</text>')
    body.append(f'<text x="{left - 4}" y="{top + ph}" text-anchor="end">{lo[1]:.3g}</text>')
    body.append(f'<text x="{left - 4}" y="{top + 10}" text-anchor="end">{hi[1]:.3g}</text>')
    if categories is not None and category_names is not None:
        for i, name in enumerate(category_names):
            y = top + 14 + 16 * i
            body.append(f'<rect x="{left + pw + 12}" y="{y - 9}" width="10" height="10" '
                        f'fill="{PALETTE[i % len(PALETTE)]}"/>')
            body.append(f'<text x="{left + pw + 26}" y="{y}">{escape(str(name))}</text>')
    elif values is not None:
        body.append(f'<text x="{left + pw + 12}" y="{top + 14}">min {vlo:.3g}</text>')
        body.append(f'<text x="{left + pw + 12}" y="{top + 30}">max {vhi:.3g}</text>')
    svg = _frame(width, height, title, body, xlabel, ylabel)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(svg)
    return svg


def heatmap(grid, path=None, *, labels=None, title="", xlabel="", ylabel="", row_names=None, col_names=None,
            cell=44, vmin=None, vmax=None) -> str:
    """Grid of values (NaN drawn as missing) with optional per-cell text labels."""
    g = np.asarray(grid, dtype=float)
    rows, cols = g.shape
    left, top = 110, 34
    width, height = left + cols * cell + 20, top + rows * cell + 50
    finite = g[np.isfinite(g)]
    vmin = (finite.min() if finite.size else 0.0) if vmin is None else vmin
    vmax = (finite.max() if finite.size else 1.0) if vmax is None else vmax
    span = vmax - vmin if vmax > vmin else 1.0
    body = []
    for i in range(rows):
        for j in range(cols):
            x, y = left + j * cell, top + i * cell
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="{ramp_color((g[i, j] - vmin) / span)}" stroke="white"/>')
            if labels is not None and labels[i][j]:
                body.append(f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                            f'font-size="9">{escape(str(labels[i][j]))}</text>')
        if row_names is not None:
            body.append(f'<text x="{left - 6}" y="{top + i * cell + cell / 2 + 4:.1f}" text-anchor="end">'
                        f'{escape(str(row_names[i]))}</text>')
    if col_names is not None:
        for j, name in enumerate(col_names):
            body.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{top + rows * cell + 14}" '
                        f'text-anchor="middle" font-size="9">{escape(str(name))}</text>')
    svg = _frame(width, height, title, body, xlabel, ylabel)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(svg)
    return svg
