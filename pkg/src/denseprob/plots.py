"""Tiny SVG line-plot writer (no plotting dependency)."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def line_plot_svg(series, title="", xlabel="", ylabel="", width=480, height=320):
    """Render ``{label: (x, y)}`` as an SVG string.

    Non-finite points are dropped.  Axis limits cover all finite data.
    """
    ml, mr, mt, mb = 56, 16, 28, 44
    pw, ph = width - ml - mr, height - mt - mb
    xs = [np.asarray(x, float) for x, _ in series.values()]
    ys = [np.asarray(y, float) for _, y in series.values()]
    allx = np.concatenate(xs) if xs else np.zeros(1)
    ally = np.concatenate(ys) if ys else np.zeros(1)
    fin = np.isfinite(allx) & np.isfinite(ally)
    if not fin.any():
        allx, ally = np.zeros(1), np.zeros(1)
    else:
        allx, ally = allx[fin], ally[fin]
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = min(0.0, float(ally.min())), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in np.linspace(0, 1, 6):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{px(xv):.1f}" y="{mt + ph + 14}" text-anchor="middle">{xv:.2g}</text>')
        out.append(f'<text x="{ml - 4}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for i, (label, (x, y)) in enumerate(series.items()):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[ok], y[ok]))
        color = COLORS[i % len(COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 14 + 14 * i
        out.append(f'<line x1="{ml + pw - 110}" y1="{ly - 4}" x2="{ml + pw - 92}" y2="{ly - 4}" stroke="{color}"/>')
        out.append(f'<text x="{ml + pw - 88}" y="{ly}">{escape(str(label))}</text>')
    out.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="12" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 12 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_line_plot(path, series, **kw):
    with open(path, "w") as fh:
        fh.write(line_plot_svg(series, **kw))
