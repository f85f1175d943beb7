"""Tiny self-contained SVG writer for scatter and line plots.

Output depends only on the data (fixed number formatting, no timestamps), so
identical inputs give byte-identical files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v):
    return f"{v:.2f}"


def _tick(v):
    return f"{v:.3g}"


@dataclass
class Plot:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    width: int = 480
    height: int = 360
    margin: int = 56
    series: list = field(default_factory=list)

    def scatter(self, x, y, label="", color=None, radius=2.5, marker="circle"):
        self.series.append(("scatter", np.asarray(x, float), np.asarray(y, float), label,
                            color, radius, marker))
        return self

    def line(self, x, y, label="", color=None, width=1.5):
        self.series.append(("line", np.asarray(x, float), np.asarray(y, float), label,
                            color, width, None))
        return self

    def _bounds(self):
        xs = np.concatenate([s[1] for s in self.series]) if self.series else np.zeros(1)
        ys = np.concatenate([s[2] for s in self.series]) if self.series else np.zeros(1)
        xs, ys = xs[np.isfinite(xs)], ys[np.isfinite(ys)]
        bounds = []
        for v in (xs, ys):
            lo, hi = (float(v.min()), float(v.max())) if v.size else (0.0, 1.0)
            if hi == lo:
                lo, hi = lo - 0.5, hi + 0.5
            pad = 0.04 * (hi - lo)
            bounds.append((lo - pad, hi + pad))
        return bounds

    def render(self):
        (x0, x1), (y0, y1) = self._bounds()
        w, h, m = self.width, self.height, self.margin
        pw, ph = w - 2 * m, h - 2 * m

        def px(x):
            return m + (x - x0) / (x1 - x0) * pw

        def py(y):
            return h - m - (y - y0) / (y1 - y0) * ph

        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
               f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
               f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
               f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
        for t in np.linspace(x0, x1, 5):
            out.append(f'<text x="{_fmt(px(t))}" y="{h - m + 16}" text-anchor="middle">'
                       f'{_tick(t)}</text>')
        for t in np.linspace(y0, y1, 5):
            out.append(f'<text x="{m - 6}" y="{_fmt(py(t) + 4)}" text-anchor="end">'
                       f'{_tick(t)}</text>')
        if self.title:
            out.append(f'<text x="{w / 2}" y="{m / 2}" text-anchor="middle" font-size="13">'
                       f'{escape(self.title)}</text>')
        if self.xlabel:
            out.append(f'<text x="{w / 2}" y="{h - 12}" text-anchor="middle">'
                       f'{escape(self.xlabel)}</text>')
        if self.ylabel:
            out.append(f'<text x="14" y="{h / 2}" text-anchor="middle" '
                       f'transform="rotate(-90 14 {h / 2})">{escape(self.ylabel)}</text>')
        for i, (kind, xs, ys, label, color, size, marker) in enumerate(self.series):
            color = color or PALETTE[i % len(PALETTE)]
            ok = np.isfinite(xs) & np.isfinite(ys)
            if kind == "line":
                pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(xs[ok], ys[ok]))
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                           f'stroke-width="{size}"/>')
            else:
                for a, b in zip(xs[ok], ys[ok]):
                    cx, cy = _fmt(px(a)), _fmt(py(b))
                    if marker == "cross":
                        r = size * 1.6
                        out.append(f'<path d="M{float(cx) - r:.2f},{float(cy) - r:.2f} '
                                   f'L{float(cx) + r:.2f},{float(cy) + r:.2f} '
                                   f'M{float(cx) - r:.2f},{float(cy) + r:.2f} '
                                   f'L{float(cx) + r:.2f},{float(cy) - r:.2f}" '
                                   f'stroke="{color}" stroke-width="2"/>')
                    else:
                        out.append(f'<circle cx="{cx}" cy="{cy}" r="{size}" fill="{color}"/>')
            if label:
                ly = m + 14 + 14 * i
                out.append(f'<rect x="{w - m - 110}" y="{ly - 8}" width="8" height="8" '
                           f'fill="{color}"/>')
                out.append(f'<text x="{w - m - 98}" y="{ly}">{escape(label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"

    def write(self, path):
        Path(path).write_text(self.render())
