# utils/svg_charts.py
"""
Module `svg_charts` for depth-trace.

Standalone SVG heatmaps and bar charts, written as plain text so that the
same input always produces the same bytes.

Colour maps are piecewise linear between anchor colours:

    DIVERGING   -1 '#ca0020' -> 0 '#ffffff' -> +1 '#2a99d6'   (cosine values)
    SEQUENTIAL   0 '#ffffff' -> vmax '#ca0020'                  (Future Effect)

Absent or flagged cells are drawn in ABSENT_FILL with a cross.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from utils.errors import ParameterError, ShapeError

CELL = 28
MARGIN = 64
ABSENT_FILL = "#bdbdbd"
BAR_FILL = "#2a99d6"
FONT = 'font-family="monospace" font-size="11"'


@dataclass(frozen=True)
class ColorScale:
    vmin: float
    vmax: float
    anchors: tuple[str, ...]

    def __post_init__(self):
        if not self.vmax > self.vmin:
            raise ParameterError(f"color scale needs vmax > vmin, got [{self.vmin}, {self.vmax}]")
        if len(self.anchors) < 2:
            raise ParameterError("color scale needs at least two anchor colours")

    def color(self, value: float) -> str:
        t = (min(max(value, self.vmin), self.vmax) - self.vmin) / (self.vmax - self.vmin)
        segments = len(self.anchors) - 1
        i = min(int(t * segments), segments - 1)
        local = t * segments - i
        lo, hi = _rgb(self.anchors[i]), _rgb(self.anchors[i + 1])
        mixed = (round(a + (b - a) * local) for a, b in zip(lo, hi))
        return "#" + "".join(f"{c:02x}" for c in mixed)


def _rgb(hex_color: str) -> tuple[int, int, int]:
    h = hex_color.lstrip("#")
    return int(h[0:2], 16), int(h[2:4], 16), int(h[4:6], 16)


DIVERGING = ("#ca0020", "#ffffff", "#2a99d6")
SEQUENTIAL = ("#ffffff", "#ca0020")


def diverging_scale(limit: float = 1.0) -> ColorScale:
    return ColorScale(-limit, limit, DIVERGING)


def sequential_scale(matrix: np.ndarray) -> ColorScale:
    """0 -> white, largest defined value (at least 1e-12) -> red."""
    defined = matrix[~np.isnan(matrix)]
    peak = float(defined.max()) if defined.size else 0.0
    return ColorScale(0.0, max(peak, 1e-12), SEQUENTIAL)


def _num(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".") if x != int(x) else str(int(x))


def _write(path: str | Path, lines: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")
    return path


def emit_heatmap_svg(
    matrix: np.ndarray,
    scale: ColorScale,
    path: str | Path,
    *,
    title: str = "",
    row_label: str = "s (skipped layer)",
    col_label: str = "l (affected layer)",
    row_ticks: Sequence | None = None,
    col_ticks: Sequence | None = None,
) -> Path:
    """One <rect class="cell"> per matrix entry; NaN entries are drawn as absent."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ShapeError(f"heatmap needs a non-empty 2-D matrix, got shape {matrix.shape}")
    n_rows, n_cols = matrix.shape
    row_ticks = list(range(n_rows)) if row_ticks is None else list(row_ticks)
    col_ticks = list(range(n_cols)) if col_ticks is None else list(col_ticks)
    width = MARGIN * 2 + n_cols * CELL
    height = MARGIN * 2 + n_rows * CELL

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" {FONT}>{escape(title)}</text>',
    ]
    for i in range(n_rows):
        for j in range(n_cols):
            x, y = MARGIN + j * CELL, MARGIN + i * CELL
            value = matrix[i, j]
            if math.isnan(value):
                lines.append(
                    f'<rect class="cell absent" x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
                    f'fill="{ABSENT_FILL}" stroke="#ffffff"/>'
                )
                lines.append(
                    f'<path d="M{x + 6} {y + 6}L{x + CELL - 6} {y + CELL - 6}M{x + CELL - 6} {y + 6}'
                    f'L{x + 6} {y + CELL - 6}" stroke="#ffffff" stroke-width="1"/>'
                )
            else:
                lines.append(
                    f'<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" '
                    f'fill="{scale.color(value)}" stroke="#ffffff"><title>{value:.6g}</title></rect>'
                )
    for i, tick in enumerate(row_ticks):
        y = MARGIN + i * CELL + CELL // 2 + 4
        lines.append(f'<text x="{MARGIN - 6}" y="{y}" text-anchor="end" {FONT}>{escape(str(tick))}</text>')
    for j, tick in enumerate(col_ticks):
        x = MARGIN + j * CELL + CELL // 2
        lines.append(f'<text x="{x}" y="{MARGIN - 6}" text-anchor="middle" {FONT}>{escape(str(tick))}</text>')
    lines.append(
        f'<text x="{width // 2}" y="{height - MARGIN // 2}" text-anchor="middle" {FONT}>{escape(col_label)}</text>'
    )
    lines.append(
        f'<text x="16" y="{height // 2}" text-anchor="middle" transform="rotate(-90 16 {height // 2})" {FONT}>'
        f"{escape(row_label)}</text>"
    )
    lines.append(
        f'<text x="{width - 4}" y="{height - 8}" text-anchor="end" {FONT}>'
        f"[{_num(scale.vmin)}, {_num(scale.vmax)}]</text>"
    )
    lines.append("</svg>")
    return _write(path, lines)


def emit_bar_svg(
    values: Sequence[float],
    path: str | Path,
    *,
    title: str = "",
    x_label: str = "s (skipped layer)",
    y_label: str = "D(s)",
) -> Path:
    values = [float(v) for v in values]
    if not values:
        raise ShapeError("bar chart needs at least one value")
    plot_h = 160
    width = MARGIN * 2 + len(values) * CELL
    height = MARGIN * 2 + plot_h
    peak = max(max(values), 1e-12)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" {FONT}>{escape(title)}</text>',
        f'<line x1="{MARGIN}" y1="{MARGIN + plot_h}" x2="{width - MARGIN}" y2="{MARGIN + plot_h}" stroke="#000000"/>',
    ]
    for i, value in enumerate(values):
        bar_h = round(plot_h * max(value, 0.0) / peak, 2)
        x = MARGIN + i * CELL + 4
        y = round(MARGIN + plot_h - bar_h, 2)
        lines.append(
            f'<rect class="bar" x="{x}" y="{y}" width="{CELL - 8}" height="{bar_h}" fill="{BAR_FILL}">'
            f"<title>{value:.6g}</title></rect>"
        )
        lines.append(
            f'<text x="{x + (CELL - 8) // 2}" y="{MARGIN + plot_h + 14}" text-anchor="middle" {FONT}>{i}</text>'
        )
    lines.append(
        f'<text x="{width // 2}" y="{height - MARGIN // 3}" text-anchor="middle" {FONT}>{escape(x_label)}</text>'
    )
    lines.append(
        f'<text x="16" y="{height // 2}" text-anchor="middle" transform="rotate(-90 16 {height // 2})" {FONT}>'
        f"{escape(y_label)}</text>"
    )
    lines.append(f'<text x="{MARGIN - 6}" y="{MARGIN + 4}" text-anchor="end" {FONT}>{peak:.3g}</text>')
    lines.append("</svg>")
    return _write(path, lines)


def matrix_from_rows(
    rows: Sequence[dict[str, str]], row_key: str, col_key: str, value_key: str = "value"
) -> tuple[np.ndarray, list[int], list[int]]:
    """Pivot CSV records into a matrix; missing or empty values become NaN."""
    if not rows:
        raise ShapeError("no rows to render")
    row_ticks = sorted({int(r[row_key]) for r in rows})
    col_ticks = sorted({int(r[col_key]) for r in rows})
    if row_key == "s" and col_key == "l":
        # a Future Effect grid spans every layer on both axes
        layers = list(range(max(row_ticks + col_ticks) + 1))
        row_ticks, col_ticks = layers, layers
    index_r = {v: i for i, v in enumerate(row_ticks)}
    index_c = {v: j for j, v in enumerate(col_ticks)}
    matrix = np.full((len(row_ticks), len(col_ticks)), np.nan, dtype=np.float64)
    for r in rows:
        if r[value_key] != "":
            matrix[index_r[int(r[row_key])], index_c[int(r[col_key])]] = float(r[value_key])
    return matrix, row_ticks, col_ticks
