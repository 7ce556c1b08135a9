"""Tiny self-contained SVG charts for run outputs.

Line and scatter charts with fixed geometry and no external assets. The
output is a pure function of the data: no timestamps or random ids, so
repeated runs produce identical files.
"""

import math

from .errors import ArgumentError

WIDTH = 640
HEIGHT = 480
MARGIN_LEFT = 72
MARGIN_RIGHT = 24
MARGIN_TOP = 44
MARGIN_BOTTOM = 56
TICKS = 5

PALETTE = ("#1f6fb2", "#d2552e", "#3e8d50", "#8a5cb8", "#ba3a66", "#6b6b6b")


def _finite(values):
    return [v for v in values if math.isfinite(v)]


def _bounds(values):
    vals = _finite(values)
    if not vals:
        raise ArgumentError("chart needs at least one finite data point")
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad


class _Frame:
    """Maps data coordinates onto the pixel plot area."""

    def __init__(self, xs, ys):
        self.x0, self.x1 = _bounds(xs)
        self.y0, self.y1 = _bounds(ys)
        self.px0 = MARGIN_LEFT
        self.px1 = WIDTH - MARGIN_RIGHT
        self.py0 = HEIGHT - MARGIN_BOTTOM
        self.py1 = MARGIN_TOP

    def x(self, v):
        t = (v - self.x0) / (self.x1 - self.x0)
        return self.px0 + t * (self.px1 - self.px0)

    def y(self, v):
        t = (v - self.y0) / (self.y1 - self.y0)
        return self.py0 + t * (self.py1 - self.py0)


def _esc(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))


def _axes(frame, title, x_label, y_label):
    parts = [
        f'<rect x="{frame.px0}" y="{frame.py1}" width="{frame.px1 - frame.px0}" '
        f'height="{frame.py0 - frame.py1}" fill="none" stroke="#444"/>',
        f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="15">'
        f"{_esc(title)}</text>",
        f'<text x="{(frame.px0 + frame.px1) // 2}" y="{HEIGHT - 12}" '
        f'text-anchor="middle" font-size="12">{_esc(x_label)}</text>',
        f'<text x="16" y="{(frame.py0 + frame.py1) // 2}" text-anchor="middle" '
        f'font-size="12" transform="rotate(-90 16 {(frame.py0 + frame.py1) // 2})">'
        f"{_esc(y_label)}</text>",
    ]
    for i in range(TICKS):
        fx = frame.x0 + i * (frame.x1 - frame.x0) / (TICKS - 1)
        fy = frame.y0 + i * (frame.y1 - frame.y0) / (TICKS - 1)
        px = frame.x(fx)
        py = frame.y(fy)
        parts.append(f'<line x1="{px:.2f}" y1="{frame.py0}" x2="{px:.2f}" '
                     f'y2="{frame.py0 + 5}" stroke="#444"/>')
        parts.append(f'<text x="{px:.2f}" y="{frame.py0 + 18}" text-anchor="middle" '
                     f'font-size="11">{fx:.4g}</text>')
        parts.append(f'<line x1="{frame.px0 - 5}" y1="{py:.2f}" x2="{frame.px0}" '
                     f'y2="{py:.2f}" stroke="#444"/>')
        parts.append(f'<text x="{frame.px0 - 8}" y="{py + 4:.2f}" text-anchor="end" '
                     f'font-size="11">{fy:.4g}</text>')
    return parts


def _legend(names):
    parts = []
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        y = MARGIN_TOP + 14 + 16 * i
        x = WIDTH - MARGIN_RIGHT - 150
        parts.append(f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{x + 15}" y="{y}" font-size="11">{_esc(name)}</text>')
    return parts


def _document(body):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" '
            f'font-family="sans-serif">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
                      *body, "</svg>"]) + "\n"


def line_chart(series, title="", x_label="", y_label=""):
    """SVG line chart; series is a list of (name, [(x, y), ...])."""
    if not series or any(not pts for _, pts in series):
        raise ArgumentError("line chart needs non-empty series")
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    frame = _Frame(xs, ys)
    body = _axes(frame, title, x_label, y_label)
    for i, (name, pts) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{frame.x(x):.2f},{frame.y(y):.2f}" for x, y in pts
                          if math.isfinite(x) and math.isfinite(y))
        body.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                    f'stroke-width="1.8"/>')
    if len(series) > 1:
        body.extend(_legend([name for name, _ in series]))
    return _document(body)


def scatter_chart(groups, title="", x_label="", y_label=""):
    """SVG scatter; groups is a list of (name, [(x, y), ...])."""
    if not groups or all(not pts for _, pts in groups):
        raise ArgumentError("scatter chart needs at least one point")
    xs = [x for _, pts in groups for x, _ in pts]
    ys = [y for _, pts in groups for _, y in pts]
    frame = _Frame(xs, ys)
    body = _axes(frame, title, x_label, y_label)
    for i, (name, pts) in enumerate(groups):
        color = PALETTE[i % len(PALETTE)]
        for x, y in pts:
            if math.isfinite(x) and math.isfinite(y):
                body.append(f'<circle cx="{frame.x(x):.2f}" cy="{frame.y(y):.2f}" '
                            f'r="3" fill="{color}" fill-opacity="0.75"/>')
    body.extend(_legend([name for name, _ in groups]))
    return _document(body)


def roc_chart(points, auc, title="ROC"):
    """ROC curve with the chance diagonal; points are (threshold, fpr, tpr)."""
    curve = [(fpr, tpr) for _, fpr, tpr in points]
    series = [(f"AUC {auc:.3f}", curve), ("chance", [(0.0, 0.0), (1.0, 1.0)])]
    return line_chart(series, title=title, x_label="false positive rate",
                      y_label="true positive rate")
