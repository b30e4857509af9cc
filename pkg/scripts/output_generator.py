#!/usr/bin/env python3
"""
Output Generator Module
Writes run artifacts: CSV tables, SVG figures and the summary block.

CSV and summary files start with `#` comment lines holding the resolved
scenario; SVG figures open with a <title> and a <desc> element holding
the same lines. Nothing time-dependent is written; identical
scenarios give byte-identical files.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import svgwrite

logger = logging.getLogger(__name__)

FIGURE_SIZE = (640, 420)
MARGIN = 60
HEATMAP_MAX_CELLS = 120
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def _heat_color(level: float) -> str:
    """Blue (low) to red (high) for level in [0, 1]."""
    level = float(np.clip(level, 0.0, 1.0))
    r = int(round(255 * level))
    b = int(round(255 * (1.0 - level)))
    g = int(round(255 * (1.0 - abs(2.0 * level - 1.0)) * 0.8))
    return f"rgb({r},{g},{b})"


class OutputGenerator:
    """Generates run output files under one directory."""

    def __init__(self, output_dir: str = "outputs", header_lines: Optional[Sequence[str]] = None,
                 formats: Iterable[str] = ("csv", "svg")):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.header_lines = list(header_lines or [])
        self.formats = set(formats)
        self.generated_files: List[str] = []

    def _record(self, path: Path) -> str:
        self.generated_files.append(str(path))
        logger.debug("Wrote %s", path)
        return str(path)

    # ------------------------------------------------------------
    # TABLES
    # ------------------------------------------------------------

    def _write_header(self, f) -> None:
        for line in self.header_lines:
            f.write(f"# {line}\n")

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence]) -> Optional[str]:
        """Comment header, column row, then one line per row."""
        if "csv" not in self.formats:
            return None
        path = self.output_dir / name
        with open(path, "w", newline="", encoding="utf-8") as f:
            self._write_header(f)
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        return self._record(path)

    def write_summary(self, name: str, lines: Sequence[str]) -> str:
        """Comment header, then one `key = value` line each."""
        path = self.output_dir / name
        with open(path, "w", encoding="utf-8") as f:
            self._write_header(f)
            for line in lines:
                f.write(f"{line}\n")
        return self._record(path)

    # ------------------------------------------------------------
    # FIGURES
    # ------------------------------------------------------------

    def _drawing(self, name: str, title: str) -> svgwrite.Drawing:
        width, height = FIGURE_SIZE
        dwg = svgwrite.Drawing(str(self.output_dir / name), size=(width, height), debug=False)
        if self.header_lines:
            dwg.set_desc(title=title, desc="\n".join(self.header_lines))
        dwg.add(dwg.rect(insert=(0, 0), size=(width, height), fill="white"))
        dwg.add(dwg.text(title, insert=(width / 2, 24), text_anchor="middle",
                         font_size=16, font_family="sans-serif"))
        return dwg

    def _axes(self, dwg: svgwrite.Drawing, xlabel: str, ylabel: str,
              xlim: Sequence[float], ylim: Sequence[float]) -> None:
        width, height = FIGURE_SIZE
        x0, y0, x1, y1 = MARGIN, height - MARGIN, width - MARGIN, MARGIN
        dwg.add(dwg.line((x0, y0), (x1, y0), stroke="black"))
        dwg.add(dwg.line((x0, y0), (x0, y1), stroke="black"))
        dwg.add(dwg.text(xlabel, insert=((x0 + x1) / 2, height - 15), text_anchor="middle",
                         font_size=12, font_family="sans-serif"))
        dwg.add(dwg.text(ylabel, insert=(15, (y0 + y1) / 2), text_anchor="middle", font_size=12,
                         font_family="sans-serif", transform=f"rotate(-90 15 {(y0 + y1) / 2})"))
        for value, anchor, pos in ((xlim[0], "start", (x0, y0 + 16)), (xlim[1], "end", (x1, y0 + 16)),
                                   (ylim[0], "end", (x0 - 4, y0)), (ylim[1], "end", (x0 - 4, y1 + 10))):
            dwg.add(dwg.text(f"{value:.3g}", insert=pos, text_anchor=anchor, font_size=10,
                             font_family="sans-serif"))

    def write_heatmap_svg(self, name: str, x: np.ndarray, y: np.ndarray, values: np.ndarray,
                          title: str, xlabel: str = "age a", ylabel: str = "time t") -> Optional[str]:
        """values[j, i] drawn as a rect grid over (x[i], y[j])."""
        if "svg" not in self.formats:
            return None
        values = np.asarray(values, dtype=float)
        row_stride = max(1, int(np.ceil(values.shape[0] / HEATMAP_MAX_CELLS)))
        col_stride = max(1, int(np.ceil(values.shape[1] / HEATMAP_MAX_CELLS)))
        values = values[::row_stride, ::col_stride]
        width, height = FIGURE_SIZE
        dwg = self._drawing(name, title)
        lo, hi = float(np.min(values)), float(np.max(values))
        span = hi - lo if hi > lo else 1.0
        plot_w, plot_h = width - 2 * MARGIN, height - 2 * MARGIN
        cell_w, cell_h = plot_w / values.shape[1], plot_h / values.shape[0]
        cells = dwg.g(shape_rendering="crispEdges")
        for j in range(values.shape[0]):
            top = height - MARGIN - (j + 1) * cell_h
            for i in range(values.shape[1]):
                cells.add(dwg.rect(insert=(MARGIN + i * cell_w, top), size=(cell_w + 0.05, cell_h + 0.05),
                                   fill=_heat_color((values[j, i] - lo) / span)))
        dwg.add(cells)
        self._axes(dwg, xlabel, ylabel, (x[0], x[-1]), (y[0], y[-1]))
        dwg.add(dwg.text(f"min {lo:.3g}  max {hi:.3g}", insert=(width - MARGIN, MARGIN - 8),
                         text_anchor="end", font_size=10, font_family="sans-serif"))
        dwg.save()
        return self._record(self.output_dir / name)

    def write_series_svg(self, name: str, t: np.ndarray, series: Dict[str, np.ndarray], title: str,
                         xlabel: str = "time t", ylabel: str = "value", log_scale: bool = False) -> Optional[str]:
        """Line plot of one or more series sharing the abscissa t."""
        if "svg" not in self.formats:
            return None
        t = np.asarray(t, dtype=float)
        width, height = FIGURE_SIZE
        dwg = self._drawing(name, title)
        data = {}
        for label, values in series.items():
            values = np.asarray(values, dtype=float)
            data[label] = np.log10(np.maximum(values, 1e-300)) if log_scale else values
        stacked = np.concatenate([v for v in data.values()]) if data else np.zeros(1)
        finite = stacked[np.isfinite(stacked)]
        lo = float(np.min(finite)) if finite.size else 0.0
        hi = float(np.max(finite)) if finite.size else 1.0
        if log_scale:
            lo = max(lo, hi - 16.0)
        if hi <= lo:
            hi = lo + 1.0
        t_span = (t[-1] - t[0]) if t[-1] > t[0] else 1.0
        plot_w, plot_h = width - 2 * MARGIN, height - 2 * MARGIN

        def to_px(ti, vi):
            return (MARGIN + (ti - t[0]) / t_span * plot_w,
                    height - MARGIN - (np.clip(vi, lo, hi) - lo) / (hi - lo) * plot_h)

        for k, (label, values) in enumerate(data.items()):
            color = PALETTE[k % len(PALETTE)]
            points = [to_px(ti, vi) for ti, vi in zip(t, values) if np.isfinite(vi)]
            if len(points) > 1:
                dwg.add(dwg.polyline(points, stroke=color, fill="none", stroke_width=1.5))
            dwg.add(dwg.text(label, insert=(width - MARGIN - 4, MARGIN + 14 * (k + 1)),
                             text_anchor="end", font_size=11, fill=color, font_family="sans-serif"))
        ylabel = f"log10 {ylabel}" if log_scale else ylabel
        self._axes(dwg, xlabel, ylabel, (t[0], t[-1]), (lo, hi))
        dwg.save()
        return self._record(self.output_dir / name)
