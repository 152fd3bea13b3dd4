"""Minimal deterministic SVG emission for loss curves and latent scatters.

Plain string assembly, fixed float formatting, no external dependencies;
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import math

_W, _H = 640, 400
_MARGIN = 52
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_MARKERS = ("circle", "square", "triangle")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _bounds(values, pad_frac: float = 0.05):
    lo, hi = min(values), max(values)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("non-finite plot data")
    if hi == lo:
        hi = lo + 1.0
    pad = (hi - lo) * pad_frac
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, x_lo, x_hi, y_lo, y_hi):
        self.x_lo, self.x_hi, self.y_lo, self.y_hi = x_lo, x_hi, y_lo, y_hi

    def x(self, v):
        return _MARGIN + (v - self.x_lo) / (self.x_hi - self.x_lo) * (_W - 2 * _MARGIN)

    def y(self, v):
        return _H - _MARGIN - (v - self.y_lo) / (self.y_hi - self.y_lo) * (_H - 2 * _MARGIN)


def _frame(title: str, canvas: _Canvas, x_label: str, y_label: str):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{_MARGIN}" y1="{_H - _MARGIN}" x2="{_W - _MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_H - _MARGIN}" stroke="black"/>',
        f'<text x="{_W // 2}" y="{_H - 12}" text-anchor="middle">{x_label}</text>',
        f'<text x="14" y="{_H // 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {_H // 2})">{y_label}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = canvas.x_lo + frac * (canvas.x_hi - canvas.x_lo)
        yv = canvas.y_lo + frac * (canvas.y_hi - canvas.y_lo)
        parts.append(f'<text x="{_fmt(canvas.x(xv))}" y="{_H - _MARGIN + 14}" '
                     f'text-anchor="middle">{_fmt(xv)}</text>')
        parts.append(f'<text x="{_MARGIN - 6}" y="{_fmt(canvas.y(yv) + 4)}" '
                     f'text-anchor="end">{_fmt(yv)}</text>')
    return parts


def _marker(kind: str, cx: float, cy: float, color: str) -> str:
    if kind == "circle":
        return f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="3.5" fill="{color}"/>'
    if kind == "square":
        return (f'<rect x="{_fmt(cx - 3)}" y="{_fmt(cy - 3)}" width="6" height="6" '
                f'fill="{color}"/>')
    if kind == "triangle":
        pts = f"{_fmt(cx)},{_fmt(cy - 4)} {_fmt(cx - 3.5)},{_fmt(cy + 3)} " \
              f"{_fmt(cx + 3.5)},{_fmt(cy + 3)}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    raise ValueError(f"unknown marker kind {kind!r}")


def line_chart(series, title: str, x_label: str = "step",
               y_label: str = "loss") -> str:
    """series: list of (label, xs, ys); returns an SVG document string."""
    if not series or any(len(xs) != len(ys) or not xs for _, xs, ys in series):
        raise ValueError("each series needs matching, non-empty xs and ys")
    all_x = [v for _, xs, _ in series for v in xs]
    all_y = [v for _, _, ys in series for v in ys]
    canvas = _Canvas(*_bounds(all_x, 0.0), *_bounds(all_y))
    parts = _frame(title, canvas, x_label, y_label)
    for i, (label, xs, ys) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{_fmt(canvas.x(x))},{_fmt(canvas.y(y))}"
                       for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = _MARGIN + 14 + 14 * i
        parts.append(f'<line x1="{_W - _MARGIN - 120}" y1="{ly - 4}" '
                     f'x2="{_W - _MARGIN - 100}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{_W - _MARGIN - 94}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scatter(groups, title: str, x_label: str = "pc1", y_label: str = "pc2") -> str:
    """groups: list of (label, points) with points a list of (x, y); each
    group gets its own marker shape and color."""
    if not groups:
        raise ValueError("scatter needs at least one group")
    pts = [p for _, ps in groups for p in ps]
    if not pts:
        raise ValueError("scatter needs at least one point")
    canvas = _Canvas(*_bounds([p[0] for p in pts]), *_bounds([p[1] for p in pts]))
    parts = _frame(title, canvas, x_label, y_label)
    for i, (label, ps) in enumerate(groups):
        color = _COLORS[i % len(_COLORS)]
        kind = _MARKERS[i % len(_MARKERS)]
        for x, y in ps:
            parts.append(_marker(kind, canvas.x(x), canvas.y(y), color))
        ly = _MARGIN + 14 + 14 * i
        parts.append(_marker(kind, _W - _MARGIN - 110, ly - 4, color))
        parts.append(f'<text x="{_W - _MARGIN - 100}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
