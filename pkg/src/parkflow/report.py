"""Plain-text SVG plots and a markdown summary built from an optimization results CSV."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union
from xml.sax.saxutils import escape

import numpy as np

from .pricing import RESULT_COLUMNS, TAUS

PALETTE = (
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
    "#17becf",
)


@dataclass
class ResultRow:
    case_id: int
    block_id: str
    method: str
    p_star: float
    y_pred: float
    clamped: bool
    inelastic: bool
    queries: int
    p_obs: float
    y_obs: float
    wall_time: float


def read_results_csv(path: Union[str, Path]) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            ResultRow(
                int(r["case_id"]),
                r["block_id"],
                r["method"],
                float(r["p_star"]),
                float(r["y_pred"]),
                r["clamped"] == "1",
                r["inelastic"] == "1",
                int(r["queries"]),
                float(r["p_obs"]),
                float(r["y_obs"]),
                float(r["wall_time_s"]),
            )
            for r in reader
        ]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_range(values: Sequence[float], pad: float = 0.05) -> tuple[float, float]:
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class SvgPlot:
    """Minimal fixed-layout x/y chart; output bytes depend only on the data drawn."""

    def __init__(self, title: str, xlabel: str, ylabel: str, xr: tuple[float, float], yr: tuple[float, float]):
        self.w, self.h = 640, 420
        self.left, self.right, self.top, self.bottom = 64, 150, 36, 52
        self.xr, self.yr = xr, yr
        self.parts: list[str] = []
        self.legend: list[tuple[str, str]] = []
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def _x(self, v: float) -> float:
        lo, hi = self.xr
        return self.left + (v - lo) / (hi - lo) * (self.w - self.left - self.right)

    def _y(self, v: float) -> float:
        lo, hi = self.yr
        return self.h - self.bottom - (v - lo) / (hi - lo) * (self.h - self.top - self.bottom)

    def points(self, xs: Sequence[float], ys: Sequence[float], color: str, label: str = "") -> None:
        for x, y in zip(xs, ys):
            if math.isfinite(x) and math.isfinite(y):
                self.parts.append(f'<circle cx="{_fmt(self._x(x))}" cy="{_fmt(self._y(y))}" r="2.5" fill="{color}"/>')
        if label:
            self.legend.append((label, color))

    def line(self, xs: Sequence[float], ys: Sequence[float], color: str, label: str = "", dash: bool = False) -> None:
        pts = [(x, y) for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
        if len(pts) == 1:
            self.points([pts[0][0]], [pts[0][1]], color)
        elif pts:
            d = " ".join(f"{_fmt(self._x(x))},{_fmt(self._y(y))}" for x, y in pts)
            extra = ' stroke-dasharray="5,3"' if dash else ""
            self.parts.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')
        if label:
            self.legend.append((label, color))

    def hline(self, y: float, color: str = "#444444", label: str = "") -> None:
        self.line([self.xr[0], self.xr[1]], [y, y], color, label, dash=True)

    def _axes(self) -> list[str]:
        x0, x1 = self.left, self.w - self.right
        y0, y1 = self.h - self.bottom, self.top
        out = [
            f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="#000000"/>',
        ]
        for i in range(5):
            fx = self.xr[0] + i * (self.xr[1] - self.xr[0]) / 4
            fy = self.yr[0] + i * (self.yr[1] - self.yr[0]) / 4
            out.append(f'<text x="{_fmt(self._x(fx))}" y="{y0 + 16}" text-anchor="middle">{fx:.2f}</text>')
            out.append(f'<text x="{x0 - 6}" y="{_fmt(self._y(fy) + 4)}" text-anchor="end">{fy:.2f}</text>')
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{self.h - 12}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(
            f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
            f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{escape(self.ylabel)}</text>'
        )
        out.append(f'<text x="{self.w / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(self.title)}</text>')
        for i, (label, color) in enumerate(self.legend):
            ly = self.top + 14 * i + 8
            out.append(f'<rect x="{x1 + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
            out.append(f'<text x="{x1 + 24}" y="{ly + 1}">{escape(label)}</text>')
        return out

    def render(self) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
            f'viewBox="0 0 {self.w} {self.h}" font-family="sans-serif" font-size="11">'
        )
        body = [f'<rect width="{self.w}" height="{self.h}" fill="#ffffff"/>', *self.parts, *self._axes()]
        return "\n".join([head, *body, "</svg>"]) + "\n"


def price_occupancy_plot(rows: Sequence[ResultRow], method: str) -> str:
    """Optimized price against predicted occupancy, one colour per block."""
    rows = [r for r in rows if r.method == method]
    plot = SvgPlot(
        f"occupancy vs optimized price ({method})",
        "price ($/hr)",
        "predicted occupancy",
        _nice_range([r.p_star for r in rows]),
        _nice_range([r.y_pred for r in rows] + [0.7]),
    )
    by_block: dict[str, list[ResultRow]] = defaultdict(list)
    for r in rows:
        by_block[r.block_id].append(r)
    for i, block in enumerate(sorted(by_block)):
        pts = sorted(by_block[block], key=lambda r: (r.p_star, r.case_id))
        label = block if i < 20 else ""
        plot.points([r.p_star for r in pts], [r.y_pred for r in pts], PALETTE[i % len(PALETTE)], label)
    return plot.render()


def before_after_plot(rows: Sequence[ResultRow]) -> str:
    """Per-case mean occupancy: observed under historic prices vs predicted under each method's prices."""
    methods = sorted({r.method for r in rows})
    cases = sorted({r.case_id for r in rows})
    observed: dict[int, list[float]] = defaultdict(list)
    optimized: dict[tuple[str, int], list[float]] = defaultdict(list)
    for r in rows:
        optimized[(r.method, r.case_id)].append(r.y_pred)
        if r.method == methods[0]:
            observed[r.case_id].append(r.y_obs)
    obs_mean = [float(np.mean(observed[c])) if observed[c] else float("nan") for c in cases]
    series = {m: [float(np.mean(optimized[(m, c)])) if optimized[(m, c)] else float("nan") for c in cases] for m in methods}
    all_y = obs_mean + [y for s in series.values() for y in s] + [0.7]
    plot = SvgPlot("mean occupancy per case", "case", "occupancy", _nice_range(cases), _nice_range(all_y))
    plot.line(cases, obs_mean, "#000000", "observed")
    for i, m in enumerate(methods):
        plot.line(cases, series[m], PALETTE[i % len(PALETTE)], m)
    return plot.render()


def summary_markdown(rows: Sequence[ResultRow], taus: Sequence[float] = TAUS) -> str:
    methods = sorted({r.method for r in rows})
    head = "| method | cases | " + " | ".join(f"fail tau={t:.2f}" for t in taus) + " | median queries | median wall time (s) |"
    lines = ["# Price optimization summary", "", head, "|" + "---|" * (len(taus) + 4)]
    for m in methods:
        mr = [r for r in rows if r.method == m]
        y = np.array([r.y_pred for r in mr])
        per_case: dict[int, tuple[int, float]] = {r.case_id: (r.queries, r.wall_time) for r in mr}
        q = float(np.median([v[0] for v in per_case.values()]))
        wt = float(np.median([v[1] for v in per_case.values()]))
        ratios = " | ".join(f"{float(np.mean(y > t)):.4f}" for t in taus)
        lines.append(f"| {m} | {len(per_case)} | {ratios} | {q:g} | {wt:.6f} |")
    lines.append("")
    return "\n".join(lines)


def write_report(rows: Sequence[ResultRow], out_dir: Union[str, Path]) -> list[Path]:
    if not rows:
        raise ValueError("results are empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for m in sorted({r.method for r in rows}):
        p = out / f"price_occupancy_{m}.svg"
        p.write_text(price_occupancy_plot(rows, m), encoding="utf-8")
        written.append(p)
    p = out / "before_after.svg"
    p.write_text(before_after_plot(rows), encoding="utf-8")
    written.append(p)
    p = out / "summary.md"
    p.write_text(summary_markdown(rows), encoding="utf-8")
    written.append(p)
    return written
