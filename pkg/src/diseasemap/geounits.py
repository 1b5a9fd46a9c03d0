"""Areal units: GeoJSON loading, queen contiguity, shared borders and zero-case merging."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import InputError

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8
DEFAULT_SNAP = 1e-9

Ring = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class AreaUnit:
    """One areal unit. ``polygons`` holds rings per polygon, outer ring first."""

    id: str
    polygons: tuple[tuple[Ring, ...], ...]
    name: str | None = None

    def __post_init__(self):
        if not self.polygons or not any(self.polygons):
            raise InputError(f"unit {self.id!r}: geometry has no rings")
        for poly in self.polygons:
            for ring in poly:
                if len(ring) < 4:
                    raise InputError(f"unit {self.id!r}: ring with {len(ring)} points (need >= 4)")
                if ring[0] != ring[-1]:
                    raise InputError(f"unit {self.id!r}: ring is not closed")

    @property
    def rings(self) -> list[Ring]:
        return [r for poly in self.polygons for r in poly]

    def centroid(self) -> tuple[float, float]:
        """Area-weighted planar centroid of the outer rings, in lon/lat."""
        a_sum = cx = cy = 0.0
        for poly in self.polygons:
            pts = np.asarray(poly[0], dtype=float)
            x, y = pts[:, 0], pts[:, 1]
            cross = x[:-1] * y[1:] - x[1:] * y[:-1]
            a = cross.sum() / 2.0
            if a == 0.0:
                continue
            cx += ((x[:-1] + x[1:]) * cross).sum() / 6.0
            cy += ((y[:-1] + y[1:]) * cross).sum() / 6.0
            a_sum += a
        if a_sum == 0.0:
            pts = np.concatenate([np.asarray(r, dtype=float)[:-1] for r in self.rings])
            return float(pts[:, 0].mean()), float(pts[:, 1].mean())
        return cx / a_sum, cy / a_sum

    def to_geojson_geometry(self) -> dict:
        if len(self.polygons) == 1:
            return {"type": "Polygon", "coordinates": [[list(p) for p in r] for r in self.polygons[0]]}
        return {
            "type": "MultiPolygon",
            "coordinates": [[[list(p) for p in r] for r in poly] for poly in self.polygons],
        }


def _parse_ring(raw, where: str) -> Ring:
    try:
        ring = tuple((float(p[0]), float(p[1])) for p in raw)
    except (TypeError, ValueError, IndexError) as exc:
        raise InputError(f"{where}: bad coordinates ({exc})") from None
    return ring


def load_units(
    geojson_document: str | dict,
    id_property: str = "id",
    name_property: str | None = None,
) -> list[AreaUnit]:
    """Parse a GeoJSON FeatureCollection into units, keeping document order."""
    if isinstance(geojson_document, str):
        try:
            doc = json.loads(geojson_document)
        except json.JSONDecodeError as exc:
            raise InputError(f"malformed JSON: {exc}") from None
    else:
        doc = geojson_document
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise InputError("document is not a GeoJSON FeatureCollection")

    units: list[AreaUnit] = []
    seen: dict[str, int] = {}
    for k, feat in enumerate(doc.get("features", [])):
        where = f"feature {k}"
        props = feat.get("properties") or {}
        if id_property not in props or props[id_property] is None:
            raise InputError(f"{where}: missing id property {id_property!r}")
        uid = str(props[id_property])
        if uid in seen:
            raise InputError(f"{where}: duplicate id {uid!r} (first at feature {seen[uid]})")
        seen[uid] = k
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if gtype == "Polygon":
            polys = [coords]
        elif gtype == "MultiPolygon":
            polys = coords
        else:
            raise InputError(f"{where}: unsupported geometry type {gtype!r}")
        try:
            polygons = tuple(tuple(_parse_ring(r, where) for r in poly) for poly in polys)
            name = props.get(name_property) if name_property else None
            units.append(AreaUnit(uid, polygons, None if name is None else str(name)))
        except InputError as exc:
            raise InputError(f"{where}: {exc}") from None
    return units


def load_units_file(path, id_property: str = "id", name_property: str | None = None) -> list[AreaUnit]:
    with open(path, encoding="utf-8") as fh:
        return load_units(fh.read(), id_property, name_property)


# -- geometry helpers -------------------------------------------------------

def _snap_key(pt, snap: float) -> tuple[int, int]:
    return (round(pt[0] / snap), round(pt[1] / snap))


def _vertex_keys(unit: AreaUnit, snap: float) -> set[tuple[int, int]]:
    return {_snap_key(p, snap) for ring in unit.rings for p in ring}


def _segment_keys(unit: AreaUnit, snap: float) -> set[tuple]:
    segs = set()
    for ring in unit.rings:
        keys = [_snap_key(p, snap) for p in ring]
        for a, b in zip(keys[:-1], keys[1:]):
            if a != b:
                segs.add((a, b) if a < b else (b, a))
    return segs


def haversine_m(lon1, lat1, lon2, lat2, radius: float = EARTH_RADIUS_M):
    """Great-circle distance on a sphere; accepts scalars or arrays in degrees."""
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def _segments_length(segs: Iterable[tuple], snap: float) -> float:
    segs = sorted(segs)
    if not segs:
        return 0.0
    arr = np.array([(a[0], a[1], b[0], b[1]) for a, b in segs], dtype=float) * snap
    return float(np.sum(haversine_m(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])))


def shared_border_length(a: AreaUnit, b: AreaUnit, snap: float = DEFAULT_SNAP) -> float:
    """Geodesic length (m) of boundary segments common to both units; 0 for vertex contact."""
    return _segments_length(_segment_keys(a, snap) & _segment_keys(b, snap), snap)


# -- adjacency --------------------------------------------------------------

@dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric neighbour structure over ``ids`` (index order is unit order)."""

    ids: tuple[str, ...]
    neighbors: tuple[tuple[int, ...], ...]
    border_length: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.ids) != len(self.neighbors):
            raise InputError("ids and neighbors differ in length")
        for i, nb in enumerate(self.neighbors):
            if i in nb:
                raise InputError(f"self-loop at unit {self.ids[i]!r}")
            for j in nb:
                if i not in self.neighbors[j]:
                    raise InputError(f"asymmetric adjacency between {self.ids[i]!r} and {self.ids[j]!r}")

    @property
    def n(self) -> int:
        return len(self.ids)

    def degree(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.int64)

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.neighbors) for j in nb if i < j]

    def border(self, i: int, j: int) -> float:
        return self.border_length.get((min(i, j), max(i, j)), 0.0)

    def index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.ids)}

    def weights(self) -> sparse.csr_matrix:
        """Binary contiguity matrix W."""
        e = self.edges()
        if not e:
            return sparse.csr_matrix((self.n, self.n))
        r, c = np.array(e).T
        data = np.ones(2 * len(e))
        return sparse.csr_matrix((data, (np.r_[r, c], np.r_[c, r])), shape=(self.n, self.n))


def graph_from_pairs(ids: Sequence[str], pairs: dict[tuple[int, int], float]) -> AdjacencyGraph:
    nb = [set() for _ in ids]
    for i, j in pairs:
        nb[i].add(j)
        nb[j].add(i)
    return AdjacencyGraph(tuple(ids), tuple(tuple(sorted(s)) for s in nb),
                          {(min(i, j), max(i, j)): b for (i, j), b in pairs.items()})


def build_queen_adjacency(units: Sequence[AreaUnit], snap: float = DEFAULT_SNAP) -> AdjacencyGraph:
    """Units sharing any snapped vertex are neighbours; border lengths from shared segments."""
    if not units:
        raise InputError("no units")
    owners: dict[tuple[int, int], list[int]] = defaultdict(list)
    for k, u in enumerate(units):
        for key in _vertex_keys(u, snap):
            owners[key].append(k)
    pairs: dict[tuple[int, int], float] = {}
    for ks in owners.values():
        if len(ks) > 1:
            for a in range(len(ks)):
                for b in range(a + 1, len(ks)):
                    pairs.setdefault((min(ks[a], ks[b]), max(ks[a], ks[b])), 0.0)

    seg_owners: dict[tuple, list[int]] = defaultdict(list)
    for k, u in enumerate(units):
        for s in _segment_keys(u, snap):
            seg_owners[s].append(k)
    shared: dict[tuple[int, int], list] = defaultdict(list)
    for s, ks in seg_owners.items():
        for a in range(len(ks)):
            for b in range(a + 1, len(ks)):
                shared[(min(ks[a], ks[b]), max(ks[a], ks[b]))].append(s)
    for pair, segs in shared.items():
        pairs[pair] = _segments_length(segs, snap)
    return graph_from_pairs([u.id for u in units], pairs)


def connected_components(graph: AdjacencyGraph) -> list[list[int]]:
    """Components as sorted index lists, ordered by their smallest member."""
    seen = np.zeros(graph.n, dtype=bool)
    comps = []
    for start in range(graph.n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in graph.neighbors[i]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        comps.append(sorted(comp))
    return comps


# -- merging ----------------------------------------------------------------

@dataclass(frozen=True)
class MergeMap:
    assignments: dict[str, str]
    surviving_ids: tuple[str, ...]

    @property
    def surviving_count(self) -> int:
        return len(self.surviving_ids)

    def members(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {s: [] for s in self.surviving_ids}
        for orig, s in self.assignments.items():
            out[s].append(orig)
        return out

    def aggregate(self, values: dict[str, float]) -> dict[str, float]:
        out = {s: 0 for s in self.surviving_ids}
        for orig, v in values.items():
            out[self.assignments[orig]] += v
        return out

    @classmethod
    def identity(cls, ids: Sequence[str]) -> "MergeMap":
        return cls({u: u for u in ids}, tuple(ids))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unit_id", "merged_into"])
        for orig, s in self.assignments.items():
            w.writerow([orig, s])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MergeMap":
        rows = list(csv.DictReader(io.StringIO(text)))
        assignments = {r["unit_id"]: r["merged_into"] for r in rows}
        surviving = tuple(u for u in assignments if assignments[u] == u)
        return cls(assignments, surviving)


class MergeError(InputError):
    pass


def merge_zero_case_units(
    units: Sequence[AreaUnit],
    graph: AdjacencyGraph,
    case_counts: Sequence[int],
    tie_tol: float = 1e-9,
) -> tuple[MergeMap, AdjacencyGraph]:
    """Fold zero-case units into the neighbour sharing the longest border, to a fixed point.

    Positive-length borders are preferred over vertex-only contact; equal borders go to
    the lexicographically smallest surviving id; units with no neighbour at all go to the
    unit with the nearest centroid.
    """
    n = graph.n
    if len(units) != n or len(case_counts) != n:
        raise InputError("units, graph and case_counts must be aligned")
    counts = np.asarray(case_counts, dtype=np.int64)
    if counts.sum() == 0:
        raise MergeError("every unit has zero cases; nothing to merge into")
    ids = list(graph.ids)

    # cluster state keyed by representative index
    owner = list(range(n))
    cnt = {i: int(counts[i]) for i in range(n)}
    members = {i: [i] for i in range(n)}
    nbr: dict[int, dict[int, float]] = {i: {} for i in range(n)}
    for i in range(n):
        for j in graph.neighbors[i]:
            nbr[i][j] = graph.border(i, j)

    centroids = None
    while True:
        zero = sorted((c for c in members if cnt[c] == 0), key=lambda c: ids[c])
        if not zero:
            break
        c = zero[0]
        cand = nbr[c]
        if cand:
            positive = {k: b for k, b in cand.items() if b > 0}
            pool = positive or cand
            top = max(pool.values())
            best = min((k for k, b in pool.items() if b >= top - tie_tol * max(top, 1.0)),
                       key=lambda k: ids[k])
        else:
            if centroids is None:
                centroids = np.array([u.centroid() for u in units])
            mine = members[c]
            others = [k for k in range(n) if owner[k] != c]
            d = haversine_m(centroids[mine][:, None, 0], centroids[mine][:, None, 1],
                            centroids[others][None, :, 0], centroids[others][None, :, 1])
            dmin = d.min(axis=0)
            best = min((owner[others[j]] for j in np.flatnonzero(dmin <= dmin.min() * (1 + tie_tol))),
                       key=lambda k: ids[k])
            log.info("unit %s has no neighbours; merged by nearest centroid into %s", ids[c], ids[best])
        # absorb c into best
        for m in members[c]:
            owner[m] = best
        members[best].extend(members.pop(c))
        cnt[best] += cnt.pop(c)
        for k, b in nbr.pop(c).items():
            nbr[k].pop(c)
            if k == best:
                continue
            nbr[best][k] = nbr[best].get(k, 0.0) + b
            nbr[k][best] = nbr[best][k]

    surviving = [i for i in range(n) if i in members]
    assignments = {ids[i]: ids[owner[i]] for i in range(n)}
    new_index = {i: k for k, i in enumerate(surviving)}
    pairs = {}
    for i in surviving:
        for j, b in nbr[i].items():
            a, z = new_index[i], new_index[j]
            if a < z:
                pairs[(a, z)] = b
    merged = graph_from_pairs([ids[i] for i in surviving], pairs)
    mm = MergeMap(assignments, tuple(ids[i] for i in surviving))
    if mm.surviving_count < n:
        log.info("merged %d zero-case units; %d remain", n - mm.surviving_count, mm.surviving_count)
    return mm, merged


def merged_units(units: Sequence[AreaUnit], merge_map: MergeMap) -> list[AreaUnit]:
    """Surviving units whose geometry collects all member polygons (no dissolve)."""
    by_id = {u.id: u for u in units}
    out = []
    for s, mem in merge_map.members().items():
        polys = tuple(p for m in mem for p in by_id[m].polygons)
        out.append(AreaUnit(s, polys, by_id[s].name))
    return out


# -- export -----------------------------------------------------------------

def edge_list_csv(graph: AdjacencyGraph) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id_a", "id_b", "border_m"])
    for i, j in graph.edges():
        w.writerow([graph.ids[i], graph.ids[j], f"{graph.border(i, j):.3f}"])
    return buf.getvalue()


def gal_text(graph: AdjacencyGraph) -> str:
    lines = [str(graph.n)]
    for i, uid in enumerate(graph.ids):
        nb = graph.neighbors[i]
        lines.append(f"{uid} {len(nb)}")
        lines.append(" ".join(graph.ids[j] for j in nb))
    return "\n".join(lines) + "\n"


def read_gal(text: str) -> AdjacencyGraph:
    lines = text.splitlines()
    n = int(lines[0].split()[-1]) if len(lines[0].split()) == 1 else int(lines[0].split()[1])
    ids, nbr_ids = [], []
    pos = 1
    for _ in range(n):
        uid, deg = lines[pos].split()
        ids.append(uid)
        nbr_ids.append(lines[pos + 1].split() if int(deg) else [])
        pos += 2
    idx = {u: k for k, u in enumerate(ids)}
    pairs = {}
    for i, nb in enumerate(nbr_ids):
        for u in nb:
            j = idx[u]
            pairs[(min(i, j), max(i, j))] = 0.0
    return graph_from_pairs(ids, pairs)
