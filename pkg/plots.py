"""
igct-lab - SVG Plots
====================
Self-contained SVG figures, emitted by hand (no plotting library):

- histogram:  density polylines of several sample sets over shared bins
              (data vs CFG vs iGCT overlays)
- trajectory: x(t) paths of ODE samplers on a log-t axis
- sweep:      one metric against w, one line per method

Every figure carries a legend. Labels are HTML-escaped. Rendering happens
fully in memory, so a failed render never leaves a partial file behind.
"""
import html
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger("PLOTS")

WIDTH = 640
HEIGHT = 400
MARGIN = 50
PALETTE = ['#1f2937', '#dc2626', '#2563eb', '#16a34a', '#9333ea', '#ea580c']


# ==================== PRIMITIVES ====================

def _scale(values: np.ndarray, lo: float, hi: float, out_lo: float, out_hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return out_lo + (np.asarray(values, dtype=np.float64) - lo) / span * (out_hi - out_lo)


def _path_data(xs: np.ndarray, ys: np.ndarray) -> str:
    points = [f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys)]
    return "M " + " L ".join(points)


def _polyline(xs, ys, color: str, label: str) -> str:
    return (f'<path d="{_path_data(xs, ys)}" fill="none" stroke="{color}" stroke-width="1.5" '
            f'data-series="{html.escape(label)}"/>')


def _legend(labels: Sequence[str]) -> str:
    items = []
    for i, label in enumerate(labels):
        y = MARGIN + 16 * i
        color = PALETTE[i % len(PALETTE)]
        items.append(
            f'<line x1="{WIDTH - 170}" y1="{y}" x2="{WIDTH - 150}" y2="{y}" stroke="{color}" stroke-width="2"/>'
            f'<text x="{WIDTH - 145}" y="{y + 4}" font-size="11">{html.escape(label)}</text>'
        )
    return f'<g class="legend">{"".join(items)}</g>'


def _frame(title: str, x_label: str, y_label: str, x_range: Tuple[float, float],
           y_range: Tuple[float, float], body: str, labels: Sequence[str]) -> str:
    left, right = MARGIN, WIDTH - MARGIN
    top, bottom = MARGIN, HEIGHT - MARGIN
    return f"""<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{WIDTH / 2:.1f}" y="24" font-size="14" text-anchor="middle">{html.escape(title)}</text>
<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>
<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>
<text x="{left}" y="{bottom + 16}" font-size="10">{x_range[0]:.3g}</text>
<text x="{right}" y="{bottom + 16}" font-size="10" text-anchor="end">{x_range[1]:.3g}</text>
<text x="{left - 4}" y="{bottom}" font-size="10" text-anchor="end">{y_range[0]:.3g}</text>
<text x="{left - 4}" y="{top + 8}" font-size="10" text-anchor="end">{y_range[1]:.3g}</text>
<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 12}" font-size="12" text-anchor="middle">{html.escape(x_label)}</text>
<text x="14" y="{HEIGHT / 2:.1f}" font-size="12" transform="rotate(-90 14 {HEIGHT / 2:.1f})" text-anchor="middle">{html.escape(y_label)}</text>
{body}
{_legend(labels)}
</svg>
"""


# ==================== FIGURES ====================

def render_histogram(series: List[Tuple[str, np.ndarray]], bins: int = 60, title: str = "Sample density") -> str:
    """
    Density polylines over bin edges shared by all series.

    Raises:
        ValueError: no series, or any series empty
    """
    if not series:
        raise ValueError("histogram needs at least one series")
    for label, values in series:
        if np.asarray(values).size == 0:
            raise ValueError(f"series '{label}' is empty")
    pooled = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for _, v in series])
    edges = np.histogram_bin_edges(pooled, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    densities = [np.histogram(np.asarray(v, dtype=np.float64).ravel(), bins=edges, density=True)[0]
                 for _, v in series]
    y_max = max(float(d.max()) for d in densities) or 1.0
    xs = _scale(centers, edges[0], edges[-1], MARGIN, WIDTH - MARGIN)
    body = "\n".join(
        _polyline(xs, _scale(d, 0.0, y_max, HEIGHT - MARGIN, MARGIN), PALETTE[i % len(PALETTE)], label)
        for i, ((label, _), d) in enumerate(zip(series, densities))
    )
    return _frame(title, "x", "density", (edges[0], edges[-1]), (0.0, y_max), body, [s[0] for s in series])


def render_trajectories(series: List[Tuple[str, Dict[int, List[Tuple[float, float]]]]],
                        title: str = "PF-ODE trajectories") -> str:
    """x against log10 t for every path; one color per series."""
    if not series or not any(paths for _, paths in series):
        raise ValueError("trajectory plot needs at least one path")
    all_t = np.array([t for _, paths in series for p in paths.values() for t, _ in p])
    all_x = np.array([x for _, paths in series for p in paths.values() for _, x in p])
    log_t = np.log10(all_t)
    t_lo, t_hi = float(log_t.min()), float(log_t.max())
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    lines = []
    for i, (label, paths) in enumerate(series):
        for index in sorted(paths):
            ts = np.log10([t for t, _ in paths[index]])
            xs = np.array([x for _, x in paths[index]])
            lines.append(_polyline(_scale(ts, t_lo, t_hi, MARGIN, WIDTH - MARGIN),
                                   _scale(xs, x_lo, x_hi, HEIGHT - MARGIN, MARGIN),
                                   PALETTE[i % len(PALETTE)], label))
    return _frame(title, "log10 t", "x", (t_lo, t_hi), (x_lo, x_hi), "\n".join(lines), [s[0] for s in series])


def render_sweep(rows: List[Dict[str, str]], metric: str = "w1", title: str = "") -> str:
    """One line per method of `metric` against w, from evaluation CSV rows."""
    if not rows:
        raise ValueError("sweep plot needs at least one evaluation row")
    if metric not in rows[0]:
        raise ValueError(f"unknown metric column: {metric}")
    by_method: Dict[str, List[Tuple[float, float]]] = {}
    for row in rows:
        by_method.setdefault(f"{row['method']} (nfe {row['nfe']})", []).append((float(row['w']), float(row[metric])))
    ws = np.array([w for pts in by_method.values() for w, _ in pts])
    vs = np.array([v for pts in by_method.values() for _, v in pts])
    labels = sorted(by_method)
    lines = []
    for i, label in enumerate(labels):
        pts = sorted(by_method[label])
        lines.append(_polyline(_scale([w for w, _ in pts], ws.min(), ws.max(), MARGIN, WIDTH - MARGIN),
                               _scale([v for _, v in pts], vs.min(), vs.max(), HEIGHT - MARGIN, MARGIN),
                               PALETTE[i % len(PALETTE)], label))
    return _frame(title or f"{metric} vs w", "w", metric, (float(ws.min()), float(ws.max())),
                  (float(vs.min()), float(vs.max())), "\n".join(lines), labels)


def write_svg(path, svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    logger.info(f"✅ Wrote {path}")
    return path
