#!/usr/bin/env python3
"""
SVG Figure Generator for DepthProbe
Standalone heatmap and line-chart SVGs rendered from Jinja2 templates
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from jinja2 import Template

from core.errors import ReportError

logger = logging.getLogger(__name__)

# low, mid, high
GRADIENT_STOPS = ((49, 54, 149), (255, 255, 191), (165, 0, 38))
UNDEFINED_FILL = '#bdbdbd'
SERIES_COLORS = ['#1f77b4', '#d62728', '#2ca02c', '#ff7f0e', '#9467bd', '#8c564b']

CELL = 36
MARGIN_LEFT = 80
MARGIN_TOP = 50
MARGIN_BOTTOM = 70
LEGEND_WIDTH = 120

PLOT_WIDTH = 480
PLOT_HEIGHT = 300


HEATMAP_TEMPLATE = Template(r"""<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" viewBox="0 0 {{ width }} {{ height }}">
<style>
  .title { fill:#333; font-size:13px; font-family:Helvetica, Arial, sans-serif; }
  .label { fill:#444; font-size:11px; font-family:Helvetica, Arial, sans-serif; }
  .tick-label { fill:#666; font-size:10px; font-family:Helvetica, Arial, sans-serif; }
</style>
<text class="title" x="{{ margin_left }}" y="20">{{ title }}</text>
<g id="cells" transform="translate({{ margin_left }}, {{ margin_top }})">
{% for c in cells %}  <rect class="{{ c.css }}" x="{{ c.x }}" y="{{ c.y }}" width="{{ cell }}" height="{{ cell }}" fill="{{ c.fill }}" stroke="#ffffff"><title>{{ c.tooltip }}</title></rect>
{% endfor %}</g>
<g id="row-ticks">
{% for t in row_ticks %}  <text class="tick-label" x="{{ margin_left - 6 }}" y="{{ t.pos }}" text-anchor="end">{{ t.text }}</text>
{% endfor %}</g>
<g id="col-ticks">
{% for t in col_ticks %}  <text class="tick-label" x="{{ t.pos }}" y="{{ margin_top + grid_h + 14 }}" text-anchor="middle">{{ t.text }}</text>
{% endfor %}</g>
<text class="label" x="{{ margin_left + grid_w / 2 }}" y="{{ margin_top + grid_h + 36 }}" text-anchor="middle">{{ x_label }}</text>
<text class="label" x="16" y="{{ margin_top + grid_h / 2 }}" text-anchor="middle" transform="rotate(-90, 16, {{ margin_top + grid_h / 2 }})">{{ y_label }}</text>
<g id="scale" class="tick-label">
  <text x="{{ margin_left + grid_w + 12 }}" y="{{ margin_top + 10 }}">max {{ vmax }}</text>
  <text x="{{ margin_left + grid_w + 12 }}" y="{{ margin_top + grid_h }}">min {{ vmin }}</text>
</g>
</svg>
""", autoescape=True)


LINES_TEMPLATE = Template(r"""<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" viewBox="0 0 {{ width }} {{ height }}">
<style>
  .title { fill:#333; font-size:13px; font-family:Helvetica, Arial, sans-serif; }
  .label { fill:#444; font-size:11px; font-family:Helvetica, Arial, sans-serif; }
  .tick-label { fill:#666; font-size:10px; font-family:Helvetica, Arial, sans-serif; }
  .axis-line { stroke:#888; stroke-width:1; shape-rendering:crispEdges; }
  .tick { stroke:#e0e0e0; stroke-width:1; shape-rendering:crispEdges; }
</style>
<text class="title" x="{{ margin_left }}" y="20">{{ title }}</text>
<g id="plot" transform="translate({{ margin_left }}, {{ margin_top }})">
  <rect x="0" y="0" width="{{ plot_w }}" height="{{ plot_h }}" fill="#ffffff" stroke="#dddddd"/>
{% for t in xticks %}  <line class="tick" x1="{{ t.pos }}" y1="0" x2="{{ t.pos }}" y2="{{ plot_h }}"/>
  <text class="tick-label" x="{{ t.pos }}" y="{{ plot_h + 14 }}" text-anchor="middle">{{ t.text }}</text>
{% endfor %}{% for t in yticks %}  <line class="tick" x1="0" y1="{{ t.pos }}" x2="{{ plot_w }}" y2="{{ t.pos }}"/>
  <text class="tick-label" x="-6" y="{{ t.pos + 3 }}" text-anchor="end">{{ t.text }}</text>
{% endfor %}  <line class="axis-line" x1="0" y1="{{ plot_h }}" x2="{{ plot_w }}" y2="{{ plot_h }}"/>
  <line class="axis-line" x1="0" y1="0" x2="0" y2="{{ plot_h }}"/>
{% for s in series %}  <polyline class="series" data-label="{{ s.label }}" fill="none" stroke="{{ s.color }}" stroke-width="2" points="{{ s.points }}"/>
{% endfor %}</g>
<text class="label" x="{{ margin_left + plot_w / 2 }}" y="{{ margin_top + plot_h + 36 }}" text-anchor="middle">{{ x_label }}</text>
<text class="label" x="16" y="{{ margin_top + plot_h / 2 }}" text-anchor="middle" transform="rotate(-90, 16, {{ margin_top + plot_h / 2 }})">{{ y_label }}</text>
<g id="legend" transform="translate({{ margin_left + plot_w + 16 }}, {{ margin_top }})">
{% for s in series %}  <line x1="0" y1="{{ loop.index0 * 18 + 6 }}" x2="18" y2="{{ loop.index0 * 18 + 6 }}" stroke="{{ s.color }}" stroke-width="2"/>
  <text class="tick-label" x="24" y="{{ loop.index0 * 18 + 10 }}">{{ s.label }}</text>
{% endfor %}</g>
</svg>
""", autoescape=True)


def _fmt(value: float) -> str:
    return f"{value:.3f}"


def gradient_color(fraction: float) -> str:
    """Linear 3-stop gradient, fraction in [0, 1]"""
    fraction = min(max(fraction, 0.0), 1.0)
    if fraction <= 0.5:
        low, high, t = GRADIENT_STOPS[0], GRADIENT_STOPS[1], fraction / 0.5
    else:
        low, high, t = GRADIENT_STOPS[1], GRADIENT_STOPS[2], (fraction - 0.5) / 0.5
    rgb = [int(round(a + (b - a) * t)) for a, b in zip(low, high)]
    return '#{:02x}{:02x}{:02x}'.format(*rgb)


def emit_heatmap(matrix: np.ndarray, row_labels: Optional[Sequence] = None, col_labels: Optional[Sequence] = None,
                 title: str = 'Maximum propagated effect of skipping each layer',
                 x_label: str = 'downstream layer', y_label: str = 'source layer') -> str:
    """
    Cell grid with a linear colour scale from the matrix minimum to its maximum

    NaN cells are undefined and drawn gray. A constant matrix maps every
    defined cell to the middle colour.
    """
    values = np.asarray(matrix, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ReportError(f"heatmap needs a non-empty 2-D matrix, got shape {values.shape}")
    defined = np.isfinite(values)
    if not defined.any():
        raise ReportError("heatmap matrix has no defined cells")

    rows, cols = values.shape
    row_labels = list(row_labels) if row_labels is not None else list(range(rows))
    col_labels = list(col_labels) if col_labels is not None else list(range(cols))
    if len(row_labels) != rows or len(col_labels) != cols:
        raise ReportError("heatmap labels do not match the matrix shape")

    vmin, vmax = float(values[defined].min()), float(values[defined].max())
    cells = []
    for i in range(rows):
        for j in range(cols):
            cell = {'x': j * CELL, 'y': i * CELL}
            if defined[i, j]:
                fraction = 0.5 if vmax == vmin else (values[i, j] - vmin) / (vmax - vmin)
                cell.update(css='cell', fill=gradient_color(fraction),
                            tooltip=f"{y_label} {row_labels[i]}, {x_label} {col_labels[j]}: {values[i, j]:.4g}")
            else:
                cell.update(css='cell-undefined', fill=UNDEFINED_FILL,
                            tooltip=f"{y_label} {row_labels[i]}, {x_label} {col_labels[j]}: undefined")
            cells.append(cell)

    grid_w, grid_h = cols * CELL, rows * CELL
    return HEATMAP_TEMPLATE.render(
        width=MARGIN_LEFT + grid_w + LEGEND_WIDTH,
        height=MARGIN_TOP + grid_h + MARGIN_BOTTOM,
        margin_left=MARGIN_LEFT,
        margin_top=MARGIN_TOP,
        grid_w=grid_w,
        grid_h=grid_h,
        cell=CELL,
        cells=cells,
        row_ticks=[{'pos': MARGIN_TOP + i * CELL + CELL / 2 + 3, 'text': str(label)}
                   for i, label in enumerate(row_labels)],
        col_ticks=[{'pos': MARGIN_LEFT + j * CELL + CELL / 2, 'text': str(label)}
                   for j, label in enumerate(col_labels)],
        title=title,
        x_label=x_label,
        y_label=y_label,
        vmin=f"{vmin:.4g}",
        vmax=f"{vmax:.4g}",
    )


@dataclass
class LineSeries:
    """One curve: label plus (relative depth, value) points; NaN values are not drawn"""
    label: str
    x: Sequence[float]
    y: Sequence[float]

    def finite_points(self) -> List[Tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.x, self.y)
                if b is not None and math.isfinite(float(b))]


def _y_range(series: Sequence[LineSeries]) -> Tuple[float, float]:
    values = [y for s in series for _, y in s.finite_points()]
    if not values:
        return 0.0, 1.0
    low, high = min(values), max(values)
    if low == high:
        pad = abs(low) * 0.1 or 1.0
        return low - pad, high + pad
    return low, high


def emit_lines(series: Sequence[LineSeries], title: str = '', x_label: str = 'relative depth',
               y_label: str = 'value') -> str:
    """One polyline per series over a fixed [0, 1] x range, with a legend"""
    series = list(series)
    if not series:
        raise ReportError("line chart needs at least one series")
    for s in series:
        if len(s.x) != len(s.y):
            raise ReportError(f"series '{s.label}' has {len(s.x)} x values and {len(s.y)} y values")

    y_low, y_high = _y_range(series)

    def px(x: float) -> float:
        return x * PLOT_WIDTH

    def py(y: float) -> float:
        return PLOT_HEIGHT - (y - y_low) / (y_high - y_low) * PLOT_HEIGHT

    rendered = []
    for index, s in enumerate(series):
        points = ' '.join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in s.finite_points())
        rendered.append({'label': s.label, 'color': SERIES_COLORS[index % len(SERIES_COLORS)], 'points': points})

    y_ticks = np.linspace(y_low, y_high, 5)
    return LINES_TEMPLATE.render(
        width=MARGIN_LEFT + PLOT_WIDTH + LEGEND_WIDTH + 40,
        height=MARGIN_TOP + PLOT_HEIGHT + MARGIN_BOTTOM,
        margin_left=MARGIN_LEFT,
        margin_top=MARGIN_TOP,
        plot_w=PLOT_WIDTH,
        plot_h=PLOT_HEIGHT,
        xticks=[{'pos': _fmt(px(x)), 'text': f"{x:.2f}"} for x in np.linspace(0.0, 1.0, 6)],
        yticks=[{'pos': py(y), 'text': f"{y:.3g}"} for y in y_ticks],
        series=rendered,
        title=title,
        x_label=x_label,
        y_label=y_label,
    )


def write_svg(svg: str, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding='utf-8')
    logger.info(f"Wrote figure {path}")
    return path
