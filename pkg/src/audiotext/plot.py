"""Deterministic SVG line plots of metrics CSV columns (one polyline per run)."""

from __future__ import annotations

import json
from pathlib import Path

from .training import read_metrics

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 20, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


class PlotError(ValueError):
    pass


def run_label(csv_path) -> str:
    """``rho=<value>`` when a config.json with ``sam_rho`` sits next to the CSV, else the parent name."""
    csv_path = Path(csv_path)
    cfg_path = csv_path.parent / "config.json"
    if cfg_path.exists():
        try:
            rho = json.loads(cfg_path.read_text()).get("sam_rho")
        except json.JSONDecodeError:
            rho = None
        if rho is not None:
            return f"rho={float(rho):g}"
    return csv_path.parent.name or csv_path.stem


def load_series(csv_path, column: str, split: str | None = None):
    """(steps, values) of ``column``; ``split=None`` prefers val rows, falling back to train."""
    rows = read_metrics(csv_path)
    if rows and column not in rows[0]:
        raise PlotError(f"{csv_path}: no column {column!r}")
    if not rows:
        raise PlotError(f"{csv_path}: no rows")
    if split is None:
        has_val = any(r["split"] == "val" and r[column] != "" for r in rows)
        split = "val" if has_val else "train"
    pts = [(int(r["step"]), float(r[column])) for r in rows if r["split"] == split and r[column] != ""]
    if not pts:
        raise PlotError(f"{csv_path}: column {column!r} has no {split} values")
    return [p[0] for p in pts], [p[1] for p in pts]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, n: int = 5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(series, column: str) -> str:
    """``series``: list of (label, steps, values). Returns the SVG document text."""
    xs = [x for _, s, _ in series for x in s]
    ys = [y for _, _, v in series for y in v]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        pad = abs(y0) * 0.05 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<line x1="{MARGIN_L}" y1="{MARGIN_T + ph}" x2="{MARGIN_L + pw}" y2="{MARGIN_T + ph}" stroke="black"/>',
           f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{MARGIN_T + ph}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.2f}" y="{MARGIN_T + ph + 15}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{MARGIN_L - 5}" y="{py(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle">step</text>')
    out.append(f'<text x="15" y="{MARGIN_T + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {MARGIN_T + ph / 2:.2f})">{column}</text>')
    for k, (label, steps, values) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        if len(steps) == 1:
            out.append(f'<circle cx="{px(steps[0]):.2f}" cy="{py(values[0]):.2f}" r="3" fill="{color}"/>')
        else:
            pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(steps, values))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = MARGIN_T + 15 + 18 * k
        lx = MARGIN_L + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 25}" y="{ly + 4}">{_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def plot_curves(csv_paths, column: str, out, split: str | None = None, labels=None) -> Path:
    csv_paths = [Path(p) for p in csv_paths]
    if not csv_paths:
        raise PlotError("need at least one metrics file")
    if labels is not None and len(labels) != len(csv_paths):
        raise PlotError("one label per metrics file")
    series = []
    for i, p in enumerate(csv_paths):
        steps, values = load_series(p, column, split)
        series.append((labels[i] if labels else run_label(p), steps, values))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(series, column))
    return out
