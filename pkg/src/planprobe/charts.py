"""Minimal SVG figures: multi-series line charts and bar histograms.
No plotting dependency; output is a self-contained .svg file."""

from pathlib import Path

import numpy as np

from .errors import UsageError

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"]

_W, _H = 720, 420
_ML, _MR, _MT, _MB = 64, 24, 36, 48


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = float(min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw))
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + step * 0.5, step)


def _fmt(x: float) -> str:
    if x == int(x) and abs(x) < 1e7:
        return str(int(x))
    return f"{x:.3g}"


class _Svg:
    def __init__(self, title: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" '
            f'height="{_H}" viewBox="0 0 {_W} {_H}">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{title}</text>',
        ]

    def line(self, x1, y1, x2, y2, color="#999", width=1, dash=""):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
            f'stroke="{color}" stroke-width="{width}"{d}/>')

    def text(self, x, y, s, size=11, anchor="middle", color="#333", rotate=None):
        r = (f' transform="rotate(-90 {x:.1f} {y:.1f})"' if rotate else "")
        self.parts.append(
            f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" '
            f'font-family="sans-serif" font-size="{size}" fill="{color}"{r}>'
            f'{s}</text>')

    def polyline(self, points, color, width=1.8):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"/>')

    def rect(self, x, y, w, h, color):
        self.parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" '
            f'fill="{color}" fill-opacity="0.8"/>')

    def save(self, path):
        self.parts.append("</svg>")
        Path(path).write_text("\n".join(self.parts), encoding="utf-8")


def _frame(svg: _Svg, x_lo, x_hi, y_lo, y_hi, x_label, y_label):
    iw = _W - _ML - _MR
    ih = _H - _MT - _MB

    def sx(x):
        return _ML + (x - x_lo) / (x_hi - x_lo) * iw

    def sy(y):
        return _MT + ih - (y - y_lo) / (y_hi - y_lo) * ih

    svg.line(_ML, _MT + ih, _ML + iw, _MT + ih, "#333")
    svg.line(_ML, _MT, _ML, _MT + ih, "#333")
    for t in _ticks(x_lo, x_hi):
        svg.line(sx(t), _MT + ih, sx(t), _MT + ih + 4, "#333")
        svg.text(sx(t), _MT + ih + 18, _fmt(t))
    for t in _ticks(y_lo, y_hi):
        svg.line(_ML - 4, sy(t), _ML, sy(t), "#333")
        svg.text(_ML - 8, sy(t) + 4, _fmt(t), anchor="end")
        svg.line(_ML, sy(t), _ML + iw, sy(t), "#eee")
    svg.text(_ML + iw / 2, _H - 10, x_label, size=12)
    svg.text(18, _MT + ih / 2, y_label, size=12, rotate=True)
    return sx, sy


def line_chart(series: dict, path, title: str, x_label: str = "",
               y_label: str = "") -> None:
    """series: name -> list of (x, y). Skips empty series; at least one
    point total required."""
    series = {k: [(float(x), float(y)) for x, y in v] for k, v in series.items() if v}
    if not series:
        raise UsageError("line_chart needs at least one nonempty series")
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = (y_hi - y_lo) * 0.08 or 0.5
    y_lo, y_hi = y_lo - pad, y_hi + pad
    svg = _Svg(title)
    sx, sy = _frame(svg, x_lo, x_hi, y_lo, y_hi, x_label, y_label)
    for i, (name, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        svg.polyline([(sx(x), sy(y)) for x, y in sorted(pts)], color)
        svg.text(_ML + 10, _MT + 14 + 14 * i, name, anchor="start", color=color)
    svg.save(path)


def histogram(values, path, title: str, bins: int = 20, x_label: str = "",
              y_label: str = "count") -> None:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise UsageError("histogram needs at least one value")
    counts, edges = np.histogram(values, bins=bins)
    y_hi = max(1, counts.max())
    svg = _Svg(title)
    sx, sy = _frame(svg, float(edges[0]), float(edges[-1]), 0.0,
                    float(y_hi) * 1.05, x_label, y_label)
    base = sy(0.0)
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        if c == 0:
            continue
        svg.rect(sx(lo) + 0.5, sy(float(c)), sx(hi) - sx(lo) - 1.0,
                 base - sy(float(c)), _COLORS[0])
    svg.save(path)
