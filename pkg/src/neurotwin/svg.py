"""Hand-rolled SVG emission: polylines, rects and text only.

Charts here are build artifacts for reports, not interactive surfaces, so a
deterministic byte-stable string is worth more than styling options.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np


def _fmt(x: float) -> str:
    return format(float(x), ".2f")


class SvgCanvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self._parts: List[str] = []

    def rect(self, x, y, w, h, fill="none", stroke="none", opacity=1.0):
        self._parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
            f'fill="{fill}" stroke="{stroke}" opacity="{_fmt(opacity)}"/>')

    def line(self, x1, y1, x2, y2, stroke="#444", width=1.0):
        self._parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{_fmt(width)}"/>')

    def polyline(self, points: Sequence[Tuple[float, float]], stroke="#205080",
                 width=1.2):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self._parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(width)}"/>')

    def polygon(self, points: Sequence[Tuple[float, float]], fill="#b0c4de",
                opacity=0.5):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self._parts.append(
            f'<polygon points="{pts}" fill="{fill}" stroke="none" '
            f'opacity="{_fmt(opacity)}"/>')

    def text(self, x, y, content, size=11, fill="#222", anchor="start"):
        self._parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
            f'font-family="monospace" fill="{fill}" text-anchor="{anchor}">'
            f"{content}</text>")

    def to_string(self) -> str:
        body = "\n".join(self._parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" '
            f'fill="white" stroke="none" opacity="1.00"/>\n'
            f"{body}\n</svg>\n")


class _Axes:
    """Maps data coordinates into a pixel box (y inverted)."""

    def __init__(self, x0, y0, w, h, xmin, xmax, ymin, ymax):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xmin, self.xmax = xmin, xmax
        if ymax == ymin:
            ymax = ymin + 1.0
        self.ymin, self.ymax = ymin, ymax

    def x(self, v):
        span = self.xmax - self.xmin or 1.0
        return self.x0 + (v - self.xmin) / span * self.w

    def y(self, v):
        return self.y0 + self.h - (v - self.ymin) / (self.ymax - self.ymin) * self.h

    def frame(self, canvas: SvgCanvas, xlabel="", ylabel=""):
        canvas.rect(self.x0, self.y0, self.w, self.h, fill="none", stroke="#888")
        canvas.text(self.x0, self.y0 + self.h + 14,
                    f"{xlabel}  [{_fmt(self.xmin)} .. {_fmt(self.xmax)}]", size=10)
        canvas.text(self.x0, self.y0 - 4,
                    f"{ylabel}  [{_fmt(self.ymin)} .. {_fmt(self.ymax)}]", size=10)


def signal_chart(panels: Sequence[Tuple[str, np.ndarray, np.ndarray]],
                 title: str = "") -> str:
    """Stacked time-series panels: (label, times_s, values) per panel."""
    width, panel_h, pad = 760, 150, 50
    height = pad + len(panels) * (panel_h + 40)
    canvas = SvgCanvas(width, height)
    if title:
        canvas.text(pad, 20, title, size=13)
    for i, (label, times, values) in enumerate(panels):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        y0 = pad + i * (panel_h + 40)
        ax = _Axes(pad, y0, width - 2 * pad, panel_h,
                   float(times.min()), float(times.max()),
                   float(values.min()), float(values.max()))
        step = max(1, times.size // 2000)
        pts = [(ax.x(t), ax.y(v)) for t, v in zip(times[::step], values[::step])]
        ax.frame(canvas, xlabel="t_s", ylabel=label)
        canvas.polyline(pts)
    return canvas.to_string()


def bar_chart(labels: Sequence[str], values: Sequence[float],
              title: str = "", unit: str = "") -> str:
    width, height, pad = 560, 300, 50
    canvas = SvgCanvas(width, height)
    if title:
        canvas.text(pad, 20, title, size=13)
    vmax = max(max(values), 1e-12)
    ax = _Axes(pad, pad, width - 2 * pad, height - 2 * pad, 0, len(values), 0, vmax)
    ax.frame(canvas, xlabel="", ylabel=unit)
    bar_w = (width - 2 * pad) / len(values) * 0.7
    for i, (lab, val) in enumerate(zip(labels, values)):
        x = ax.x(i + 0.15)
        y = ax.y(val)
        canvas.rect(x, y, bar_w, ax.y(0) - y, fill="#7a5230", stroke="#4a3220")
        canvas.text(x + bar_w / 2, height - pad + 14, lab, size=10, anchor="middle")
        canvas.text(x + bar_w / 2, y - 3, _fmt(val), size=9, anchor="middle")
    return canvas.to_string()


def kinetics_chart(t_obs: np.ndarray, v_obs: np.ndarray,
                   t_line: np.ndarray, v_line: np.ndarray,
                   t_fc: np.ndarray, low_fc: np.ndarray, high_fc: np.ndarray,
                   point_fc: np.ndarray, title: str = "") -> str:
    """Observed bars, fitted trend curve, widening forecast band."""
    width, height, pad = 760, 340, 55
    canvas = SvgCanvas(width, height)
    if title:
        canvas.text(pad, 20, title, size=13)
    all_t = np.concatenate([t_obs, t_line, t_fc]) if len(t_fc) else np.concatenate([t_obs, t_line])
    all_v = [v_obs, v_line]
    if len(t_fc):
        all_v += [low_fc, high_fc]
    vcat = np.concatenate(all_v)
    ax = _Axes(pad, pad, width - 2 * pad, height - 2 * pad,
               float(all_t.min()), float(all_t.max()),
               min(0.0, float(vcat.min())), float(vcat.max()) * 1.05)
    ax.frame(canvas, xlabel="t_days", ylabel="volume_cc")
    bar_w = max(1.0, (width - 2 * pad) / max(len(t_obs), 1) * 0.5)
    for t, v in zip(t_obs, v_obs):
        x = ax.x(t)
        canvas.rect(x - bar_w / 2, ax.y(v), bar_w, ax.y(0) - ax.y(v),
                    fill="#c9a27c", stroke="none", opacity=0.8)
    if len(t_fc):
        band = ([(ax.x(t), ax.y(v)) for t, v in zip(t_fc, high_fc)]
                + [(ax.x(t), ax.y(v)) for t, v in zip(t_fc[::-1], low_fc[::-1])])
        canvas.polygon(band, fill="#d8b28e", opacity=0.45)
        canvas.polyline([(ax.x(t), ax.y(v)) for t, v in zip(t_fc, point_fc)],
                        stroke="#a0522d", width=1.6)
    canvas.polyline([(ax.x(t), ax.y(v)) for t, v in zip(t_line, v_line)],
                    stroke="#7a3b10", width=1.8)
    return canvas.to_string()


def heatmap_chart(matrix: np.ndarray, title: str = "") -> str:
    """Grayscale-to-red grid for values in [0, 1]."""
    matrix = np.asarray(matrix, dtype=float)
    rows, cols = matrix.shape
    cell, pad = 40, 50
    width = pad * 2 + cols * cell
    height = pad * 2 + rows * cell
    canvas = SvgCanvas(width, height)
    if title:
        canvas.text(pad, 20, title, size=13)
    for r in range(rows):
        for c in range(cols):
            v = float(np.clip(matrix[r, c], 0.0, 1.0))
            red = int(round(255 * v))
            other = int(round(235 * (1.0 - v)))
            fill = f"rgb({red},{other},{other})"
            canvas.rect(pad + c * cell, pad + r * cell, cell, cell,
                        fill=fill, stroke="#999")
            canvas.text(pad + c * cell + cell / 2, pad + r * cell + cell / 2 + 4,
                        _fmt(v), size=9, anchor="middle",
                        fill="#111" if v < 0.6 else "#fff")
    return canvas.to_string()
