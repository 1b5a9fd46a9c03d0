"""Static outputs for area estimates: quantile classes, RR GeoJSON and an SVG choropleth."""

from __future__ import annotations

import json
import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .geounits import AreaUnit

# sequential yellow-orange-red, 9 steps
PALETTE = ("#ffffcc", "#ffeda0", "#fed976", "#feb24c", "#fd8d3c", "#fc4e2a", "#e31a1c", "#bd0026", "#800026")


def quantile_breaks(values, k: int = 5) -> np.ndarray:
    """k + 1 break points at equally spaced empirical quantiles."""
    v = np.asarray(values, dtype=float)
    return np.quantile(v, np.linspace(0.0, 1.0, k + 1))


def classify(values, breaks) -> np.ndarray:
    """Class 0..k-1; upper breaks are inclusive except that the minimum falls in class 0."""
    inner = np.asarray(breaks)[1:-1]
    return np.searchsorted(inner, np.asarray(values, dtype=float), side="left").astype(int)


def class_colors(k: int) -> list[str]:
    if k <= len(PALETTE):
        idx = np.round(np.linspace(0, len(PALETTE) - 1, k)).astype(int) if k > 1 else [4]
        return [PALETTE[i] for i in idx]
    raise ValueError(f"at most {len(PALETTE)} classes supported")


def _num(x: float, digits: int = 6) -> float:
    v = round(float(x), digits)
    return 0.0 if v == 0 else v


def rr_geojson(units: Sequence[AreaUnit], frame) -> str:
    """FeatureCollection whose properties carry RR, lo, hi, exceedance and map_class."""
    rows = {r.unit_id: r for r in frame.itertuples(index=False)}
    feats = []
    for u in units:
        r = rows[u.id]
        props = {"id": u.id, "RR": _num(r.RR), "lo": _num(r.lo), "hi": _num(r.hi),
                 "exceedance": _num(r.exceedance), "map_class": int(r.map_class)}
        feats.append({"type": "Feature", "properties": props, "geometry": u.to_geojson_geometry()})
    return json.dumps({"type": "FeatureCollection", "features": feats}, sort_keys=True, separators=(",", ":"))


class _Projection:
    """Equirectangular with cos(latitude) scaling, fitted to a width x height box."""

    def __init__(self, units: Sequence[AreaUnit], width: float, height: float, pad: float):
        xs = [p[0] for u in units for r in u.rings for p in r]
        ys = [p[1] for u in units for r in u.rings for p in r]
        self.x0, self.y1 = min(xs), max(ys)
        lat = 0.5 * (min(ys) + max(ys))
        self.kx = math.cos(math.radians(lat)) if abs(lat) <= 90 else 1.0
        span_x = max((max(xs) - self.x0) * self.kx, 1e-12)
        span_y = max(self.y1 - min(ys), 1e-12)
        self.scale = min((width - 2 * pad) / span_x, (height - 2 * pad) / span_y)
        self.pad = pad
        self.height = span_y * self.scale + 2 * pad
        self.width = span_x * self.scale + 2 * pad

    def __call__(self, x, y):
        return (self.pad + (x - self.x0) * self.kx * self.scale, self.pad + (self.y1 - y) * self.scale)


def _path_d(unit: AreaUnit, proj: _Projection) -> str:
    parts = []
    for ring in unit.rings:
        pts = [proj(x, y) for x, y in ring[:-1]]
        parts.append("M" + " L".join(f"{px:.2f} {py:.2f}" for px, py in pts) + " Z")
    return " ".join(parts)


def choropleth_svg(units: Sequence[AreaUnit], values, classes, breaks, title: str = "Relative risk",
                   overlay: Sequence[AreaUnit] = (), width: int = 800) -> str:
    """One <path> per unit carrying data-unit and data-class; legend lists the class ranges."""
    k = len(breaks) - 1
    colors = class_colors(k)
    legend_w = 180
    proj = _Projection(list(units) + list(overlay), width - legend_w, width, 10)
    H = max(proj.height, 40 + 22 * k)
    W = proj.width + legend_w
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'viewBox="0 0 {W:.2f} {H:.2f}">',
           f"<title>{escape(title)}</title>",
           '<g id="units" stroke="#666666" stroke-width="0.3">']
    for u, c in zip(units, classes):
        out.append(f'<path class="c{c}" data-unit="{escape(u.id)}" data-class="{c}" fill="{colors[c]}" '
                   f'd="{_path_d(u, proj)}"/>')
    out.append("</g>")
    if overlay:
        out.append('<g id="overlay" fill="none" stroke="#000000" stroke-width="1.2">')
        for u in overlay:
            out.append(f'<path data-overlay="{escape(u.id)}" d="{_path_d(u, proj)}"/>')
        out.append("</g>")
    x0 = proj.width + 10
    out.append('<g id="legend" font-family="sans-serif" font-size="12">')
    out.append(f'<text x="{x0:.2f}" y="20">{escape(title)}</text>')
    for c in range(k):
        y = 32 + 22 * c
        out.append(f'<rect x="{x0:.2f}" y="{y}" width="16" height="16" fill="{colors[c]}" stroke="#666666"/>')
        out.append(f'<text x="{x0 + 22:.2f}" y="{y + 13}">{breaks[c]:.3f} - {breaks[c + 1]:.3f}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
