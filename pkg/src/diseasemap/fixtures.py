"""Synthetic geometry: square lattices, optionally jittered, as GeoJSON-ready units."""

from __future__ import annotations

import json

import numpy as np

from .geounits import AreaUnit


def lattice_units(
    rows: int,
    cols: int,
    cell: float = 1.0,
    origin: tuple[float, float] = (0.0, 0.0),
    jitter: float = 0.0,
    rng: np.random.Generator | None = None,
    drop: set[int] | frozenset = frozenset(),
    prefix: str = "U",
) -> list[AreaUnit]:
    """Row-major lattice of quadrilaterals; ``jitter`` moves interior vertices (fraction of cell).

    Vertices are shared exactly between neighbouring cells, so queen adjacency of the
    result is that of the lattice (minus dropped cells).
    """
    x = origin[0] + cell * np.arange(cols + 1, dtype=float)
    y = origin[1] + cell * np.arange(rows + 1, dtype=float)
    vx, vy = np.meshgrid(x, y)
    if jitter:
        rng = rng if rng is not None else np.random.default_rng(0)
        dx = rng.uniform(-jitter, jitter, vx.shape) * cell
        dy = rng.uniform(-jitter, jitter, vy.shape) * cell
        dx[[0, -1], :] = 0
        dx[:, [0, -1]] = 0
        dy[[0, -1], :] = 0
        dy[:, [0, -1]] = 0
        vx = vx + dx
        vy = vy + dy
    width = len(str(rows * cols - 1))
    units = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if k in drop:
                continue
            corners = [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c), (r, c)]
            ring = tuple((round(float(vx[i, j]), 9), round(float(vy[i, j]), 9)) for i, j in corners)
            units.append(AreaUnit(f"{prefix}{k:0{width}d}", ((ring,),)))
    return units


def units_geojson(units, properties: dict[str, dict] | None = None, id_property: str = "id") -> str:
    feats = []
    for u in units:
        props = {id_property: u.id}
        if u.name is not None:
            props["name"] = u.name
        if properties and u.id in properties:
            props.update(properties[u.id])
        feats.append({"type": "Feature", "properties": props, "geometry": u.to_geojson_geometry()})
    return json.dumps({"type": "FeatureCollection", "features": feats}, separators=(",", ":"))
