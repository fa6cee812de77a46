"""Tiny dependency-free SVG line plots for sweep and prediction outputs."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_plot(path, series, title="", xlabel="", ylabel="", logx=False, logy=False,
              width=640, height=400, comment=None):
    """Write ``series`` (list of (label, x, y)) as polylines.

    Non-finite points and, on log axes, non-positive points are skipped;
    each run of valid points becomes its own polyline.
    """
    margin = 60
    tx = (lambda v: math.log10(v)) if logx else float
    ty = (lambda v: math.log10(v)) if logy else float
    clean = []
    for label, xs, ys in series:
        pts = []
        for x, y in zip(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)):
            ok = np.isfinite(x) and np.isfinite(y) and (not logx or x > 0) and (not logy or y > 0)
            pts.append((tx(x), ty(y)) if ok else None)
        clean.append((label, pts))
    allpts = [p for _, pts in clean for p in pts if p is not None]
    if not allpts:
        allpts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in allpts), max(p[0] for p in allpts)
    y0, y1 = min(p[1] for p in allpts), max(p[1] for p in allpts)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(v):
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    if comment:
        out.append(f"<!-- {escape(comment)} -->")
    out.append(f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" height="{height - 2 * margin}" '
               'fill="none" stroke="#444"/>')
    for v in (x0, x1):
        text = f"{10 ** v:.3g}" if logx else f"{v:.3g}"
        out.append(f'<text x="{sx(v):.1f}" y="{height - margin + 16}" font-size="11" text-anchor="middle">{text}</text>')
    for v in (y0, y1):
        text = f"{10 ** v:.3g}" if logy else f"{v:.3g}"
        out.append(f'<text x="{margin - 6}" y="{sy(v) + 4:.1f}" font-size="11" text-anchor="end">{text}</text>')
    out.append(f'<text x="{width / 2}" y="{margin / 2}" font-size="14" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 12}" font-size="12" text-anchor="middle">'
               f'{escape(xlabel)}{" (log)" if logx else ""}</text>')
    out.append(f'<text x="14" y="{height / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {height / 2})">{escape(ylabel)}{" (log)" if logy else ""}</text>')
    for i, (label, pts) in enumerate(clean):
        color = COLORS[i % len(COLORS)]
        run = []
        for p in pts + [None]:
            if p is None:
                if len(run) > 1:
                    coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in run)
                    out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
                run = []
            else:
                run.append(p)
        out.append(f'<text x="{width - margin + 4}" y="{margin + 14 * (i + 1)}" font-size="11" '
                   f'fill="{color}">{escape(str(label))}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
