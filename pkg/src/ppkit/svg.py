"""Minimal hand-written SVG figures. Output is plain text with fixed number
formatting so reruns are byte-identical."""
from __future__ import annotations

from html import escape

import numpy as np

W, H = 480, 360
M = dict(left=60, right=20, top=30, bottom=45)


def _f(x) -> str:
    return f"{float(x):.2f}"


class _Axes:
    def __init__(self, xlim, ylim, ox=0, oy=0, w=W, h=H):
        self.x0, self.x1 = map(float, xlim)
        self.y0, self.y1 = map(float, ylim)
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1
        self.px0 = ox + M["left"]
        self.px1 = ox + w - M["right"]
        self.py0 = oy + h - M["bottom"]
        self.py1 = oy + M["top"]

    def X(self, x):
        return self.px0 + (np.asarray(x, dtype=float) - self.x0) / (self.x1 - self.x0) * (self.px1 - self.px0)

    def Y(self, y):
        return self.py0 + (np.asarray(y, dtype=float) - self.y0) / (self.y1 - self.y0) * (self.py1 - self.py0)

    def frame(self, title="", xlabel="", ylabel="") -> list[str]:
        out = [f'<rect x="{_f(self.px0)}" y="{_f(self.py1)}" width="{_f(self.px1 - self.px0)}" '
               f'height="{_f(self.py0 - self.py1)}" fill="none" stroke="black"/>']
        for t in np.linspace(self.x0, self.x1, 5):
            x = self.X(t)
            out.append(f'<text x="{_f(x)}" y="{_f(self.py0 + 15)}" font-size="10" text-anchor="middle">{t:.3g}</text>')
        for t in np.linspace(self.y0, self.y1, 5):
            y = self.Y(t)
            out.append(f'<text x="{_f(self.px0 - 4)}" y="{_f(y + 3)}" font-size="10" text-anchor="end">{t:.3g}</text>')
        cx = 0.5 * (self.px0 + self.px1)
        if title:
            out.append(f'<text x="{_f(cx)}" y="{_f(self.py1 - 10)}" font-size="12" text-anchor="middle">{escape(title)}</text>')
        if xlabel:
            out.append(f'<text x="{_f(cx)}" y="{_f(self.py0 + 32)}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
        if ylabel:
            cy = 0.5 * (self.py0 + self.py1)
            out.append(f'<text x="{_f(self.px0 - 45)}" y="{_f(cy)}" font-size="11" text-anchor="middle" '
                       f'transform="rotate(-90 {_f(self.px0 - 45)} {_f(cy)})">{escape(ylabel)}</text>')
        return out

    def line(self, x, y, dash=False, color="black") -> str:
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(self.X(x), self.Y(y)))
        d = ' stroke-dasharray="5,4"' if dash else ""
        return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{d}/>'

    def band(self, x, lo, hi, color="#bbbbbb") -> str:
        xs = np.concatenate([x, x[::-1]])
        ys = np.concatenate([hi, lo[::-1]])
        pts = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(self.X(xs), self.Y(ys)))
        return f'<polygon points="{pts}" fill="{color}" stroke="none"/>'


def _doc(body: list[str], w=W, h=H) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">'
    return "\n".join([head, f'<rect width="{w}" height="{h}" fill="white"/>'] + body + ["</svg>"]) + "\n"


def envelope_plot(radii, khat, mean, lo, hi, title="", ylabel="K(r)") -> str:
    """Empirical curve solid, simulation mean dashed, shaded envelope."""
    radii = np.asarray(radii, dtype=float)
    ys = [np.asarray(v, dtype=float) for v in (khat, mean, lo, hi) if v is not None]
    ax = _Axes((radii.min(), radii.max()), (min(v.min() for v in ys), max(v.max() for v in ys)))
    body = [ax.band(radii, np.asarray(lo), np.asarray(hi))]
    body.append(ax.line(radii, mean, dash=True))
    if khat is not None:
        body.append(ax.line(radii, khat))
    body += ax.frame(title, "r", ylabel)
    return _doc(body)


def curves_plot(curves: dict, title="", ylabel="correlation") -> str:
    """Median curves (solid) with shaded 95% bands; one colour per curve."""
    colors = ["#1f4e9c", "#b2301f", "#2c7a2c", "#7a2c7a"]
    lows = [c.lo.min() for c in curves.values()]
    highs = [c.hi.max() for c in curves.values()]
    first = next(iter(curves.values()))
    ax = _Axes((first.radii.min(), first.radii.max()), (min(min(lows), 0.0), max(max(highs), 0.0)))
    body = []
    for (name, c), col in zip(curves.items(), colors):
        body.append(ax.band(c.radii, c.lo, c.hi, color=col).replace('stroke="none"', 'stroke="none" fill-opacity="0.2"'))
        body.append(ax.line(c.radii, c.median, color=col))
    for k, (name, col) in enumerate(zip(curves, colors)):
        y = ax.py1 + 14 + 14 * k
        body.append(f'<text x="{_f(ax.px1 - 6)}" y="{_f(y)}" font-size="10" text-anchor="end" fill="{col}">{escape(name)}</text>')
    body += ax.frame(title, "distance", ylabel)
    return _doc(body)


def _pattern_body(ax: _Axes, pts, window_rings, title):
    body = []
    for ring in window_rings:
        p = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(ax.X(ring[:, 0]), ax.Y(ring[:, 1])))
        body.append(f'<polygon points="{p}" fill="none" stroke="#555555"/>')
    for x, y in zip(ax.X(pts[:, 0]), ax.Y(pts[:, 1])):
        body.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="1.5" fill="black"/>')
    body += ax.frame(title)
    return body


def pattern_panel(patterns, window) -> str:
    """Up to four point patterns as a 2x2 panel; ``patterns`` is a list of (title, points)."""
    x0, y0, x1, y1 = window.bounds
    body = []
    for k, (title, pts) in enumerate(patterns[:4]):
        ox, oy = (k % 2) * W, (k // 2) * H
        ax = _Axes((x0, x1), (y0, y1), ox, oy)
        body += _pattern_body(ax, np.asarray(pts).reshape(-1, 2), window.rings, title)
    return _doc(body, 2 * W, 2 * H)


def ratio_map(rm, title="median intensity ratio") -> str:
    """Cells shaded by log2 median ratio (blue below 1, red above); '+' and 'x' flags."""
    g = rm.grid
    x0, y0, x1, y1 = g.extent
    ax = _Axes((x0, x1), (y0, y1))
    body = []
    lr = np.log2(np.where(g.mask, rm.median, 1.0))
    scale = max(float(np.nanmax(np.abs(lr))), 1e-12)
    cw = abs(float(ax.X(x0 + g.dx) - ax.X(x0)))
    ch = abs(float(ax.Y(y0 + g.dy) - ax.Y(y0)))
    for iy in range(g.ny):
        for ix in range(g.nx):
            if not g.mask[iy, ix]:
                continue
            v = lr[iy, ix] / scale
            r, gg, b = (255, int(255 * (1 - v)), int(255 * (1 - v))) if v >= 0 else (int(255 * (1 + v)), int(255 * (1 + v)), 255)
            px = float(ax.X(x0 + ix * g.dx))
            py = float(ax.Y(y0 + (iy + 1) * g.dy))
            body.append(f'<rect x="{_f(px)}" y="{_f(py)}" width="{_f(cw)}" height="{_f(ch)}" fill="rgb({r},{gg},{b})"/>')
            mark = "+" if rm.plus[iy, ix] else ("×" if rm.cross[iy, ix] else "")
            if mark:
                body.append(f'<text x="{_f(px + cw / 2)}" y="{_f(py + ch / 2 + 3)}" font-size="{_f(max(6.0, ch))}" '
                            f'text-anchor="middle">{mark}</text>')
    body += ax.frame(title)
    return _doc(body)
