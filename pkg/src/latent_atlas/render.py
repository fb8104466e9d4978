"""Deterministic SVG scatter plots with optional cluster outlines."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .dls import Normalization
from .statmap import ClusterSet

SIZE = 600
MARGIN = 40
LEGEND_W = 140

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173",
]
# five-stop blue-to-yellow ramp for continuous targets
RAMP = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=float)


def _ramp(t: float) -> str:
    t = min(1.0, max(0.0, t)) * (len(RAMP) - 1)
    i = min(int(t), len(RAMP) - 2)
    c = RAMP[i] + (RAMP[i + 1] - RAMP[i]) * (t - i)
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def _xy(u: np.ndarray) -> np.ndarray:
    """Unit-square coordinates to canvas pixels (y axis pointing up)."""
    inner = SIZE - 2 * MARGIN
    return np.column_stack([MARGIN + u[:, 0] * inner, SIZE - MARGIN - u[:, 1] * inner])


def _outline_segments(pixels: np.ndarray, R: int) -> list[tuple[float, float, float, float]]:
    """Boundary edges of a pixel set, in unit-square coordinates."""
    member = {(int(x), int(y)) for x, y in pixels}
    segs = []
    for x, y in sorted(member):
        if (x - 1, y) not in member:
            segs.append((x, y, x, y + 1))
        if (x + 1, y) not in member:
            segs.append((x + 1, y, x + 1, y + 1))
        if (x, y - 1) not in member:
            segs.append((x, y, x + 1, y))
        if (x, y + 1) not in member:
            segs.append((x, y + 1, x + 1, y + 1))
    return [(a / R, b / R, c / R, d / R) for a, b, c, d in segs]


def scatter_svg(
    coords: np.ndarray,
    color_values=None,
    kind: str = "categorical",
    title: str = "",
    norm: Normalization | None = None,
    clusters: ClusterSet | None = None,
    R: int | None = None,
    radius: float = 2.5,
) -> str:
    """Render a 2-D scatter.

    ``kind`` is "categorical" (palette + square legend swatches) or "continuous" (ramp).
    Cluster outlines need the DLS resolution ``R`` and the ``norm`` that
    produced it; positive clusters are drawn red, negative blue.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("scatter rendering needs 2-D coordinates")
    if norm is None:
        lo, hi = coords.min(axis=0), coords.max(axis=0)
        norm = Normalization(lo, np.where(hi > lo, hi, lo + 1.0))
    u = norm.apply(coords)
    pts = _xy(u)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE + LEGEND_W}" height="{SIZE}" viewBox="0 0 {SIZE + LEGEND_W} {SIZE}">',
        f'<rect x="0" y="0" width="{SIZE + LEGEND_W}" height="{SIZE}" fill="#ffffff"/>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE - 2 * MARGIN}" height="{SIZE - 2 * MARGIN}" fill="none" stroke="#cccccc"/>',
    ]
    if title:
        out.append(f'<text x="{MARGIN}" y="{MARGIN - 12}" font-family="sans-serif" font-size="14">{escape(title)}</text>')
    legend = []
    if color_values is None:
        colors = ["#333333"] * len(pts)
    elif kind == "categorical":
        from .dataio import sorted_labels

        labels = [str(v) for v in color_values]
        cats = sorted_labels(labels)
        cmap = {c: PALETTE[i % len(PALETTE)] for i, c in enumerate(cats)}
        colors = [cmap[v] for v in labels]
        legend = [(c, cmap[c]) for c in cats]
    elif kind == "continuous":
        v = np.asarray(color_values, dtype=np.float64)
        lo, hi = float(v.min()), float(v.max())
        span = hi - lo if hi > lo else 1.0
        colors = [_ramp((x - lo) / span) for x in v]
        legend = [(f"{lo:.3g}", _ramp(0.0)), (f"{hi:.3g}", _ramp(1.0))]
    else:
        raise ValueError(f"unknown colour kind {kind!r}")
    out.append('<g stroke="none" fill-opacity="0.8">')
    for (x, y), c in zip(pts, colors):
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius}" fill="{c}"/>')
    out.append("</g>")
    if clusters is not None and R is not None:
        for cl in clusters.clusters:
            stroke = "#c00000" if cl.sign > 0 else "#0040c0"
            segs = _outline_segments(cl.pixels, R)
            d = []
            for a, b, c, e in segs:
                p0 = _xy(np.array([[a, b]]))[0]
                p1 = _xy(np.array([[c, e]]))[0]
                d.append(f"M{p0[0]:.2f} {p0[1]:.2f}L{p1[0]:.2f} {p1[1]:.2f}")
            out.append(f'<path d="{"".join(d)}" fill="none" stroke="{stroke}" stroke-width="1.5"><title>{escape(cl.label)}</title></path>')
    for i, (name, c) in enumerate(legend):
        y = MARGIN + 18 * i
        out.append(f'<rect x="{SIZE + 5}" y="{y - 5}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{SIZE + 20}" y="{y + 4}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
