"""Minimal deterministic SVG rendering.

Hand-rolled so that re-rendering the same data yields byte-identical files
(no timestamps, hashed ids, or font metrics involved). Good enough for
confusion heatmaps, metric curves, and bar charts.
"""

from __future__ import annotations


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


class Canvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts: list[str] = []

    def rect(self, x, y, w, h, fill="none", stroke="none", stroke_width=1.0):
        self.parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
            f'height="{_fmt(h)}" fill="{fill}" stroke="{stroke}" '
            f'stroke-width="{_fmt(stroke_width)}"/>')

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
            f'y2="{_fmt(y2)}" stroke="{stroke}" stroke-width="{_fmt(width)}"{d}/>')

    def polyline(self, points, stroke="#000", width=1.5):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(width)}"/>')

    def text(self, x, y, s, size=11, anchor="start", fill="#000", rotate=None):
        r = f' transform="rotate({rotate} {_fmt(x)} {_fmt(y)})"' if rotate else ""
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}" fill="{fill}"{r}>'
            f"{s}</text>")

    def to_svg(self) -> str:
        body = "\n".join(self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" '
                f'width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">\n'
                f'<rect width="100%" height="100%" fill="#fff"/>\n'
                f"{body}\n</svg>\n")


def heat_color(frac: float) -> str:
    """White -> blue ramp."""
    frac = min(max(frac, 0.0), 1.0)
    r = round(255 - 175 * frac)
    g = round(255 - 130 * frac)
    b = 255
    return f"rgb({r},{g},{b})"


class Axes:
    """Linear axes mapping data space onto a pixel box with ticks."""

    def __init__(self, canvas: Canvas, box: tuple[float, float, float, float],
                 xlim: tuple[float, float], ylim: tuple[float, float]):
        self.c = canvas
        self.x0, self.y0, self.w, self.h = box
        self.xlim = xlim
        self.ylim = ylim

    def px(self, x: float) -> float:
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * self.w

    def py(self, y: float) -> float:
        lo, hi = self.ylim
        return self.y0 + self.h - (y - lo) / (hi - lo) * self.h

    def frame(self, xlabel="", ylabel="", xticks=(), yticks=()):
        self.c.rect(self.x0, self.y0, self.w, self.h, stroke="#444")
        for t in xticks:
            x = self.px(t)
            self.c.line(x, self.y0 + self.h, x, self.y0 + self.h + 4, "#444")
            self.c.text(x, self.y0 + self.h + 16, _fmt(t), 10, "middle")
        for t in yticks:
            y = self.py(t)
            self.c.line(self.x0 - 4, y, self.x0, y, "#444")
            self.c.text(self.x0 - 6, y + 3, _fmt(t), 10, "end")
        if xlabel:
            self.c.text(self.x0 + self.w / 2, self.y0 + self.h + 32,
                        xlabel, 11, "middle")
        if ylabel:
            self.c.text(self.x0 - 34, self.y0 + self.h / 2, ylabel, 11,
                        "middle", rotate=-90)

    def plot(self, points, stroke="#1f77b4", width=1.5):
        self.c.polyline([(self.px(x), self.py(y)) for x, y in points],
                        stroke=stroke, width=width)


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
