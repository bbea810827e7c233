"""Network lattice construction from road segments.

Segments are neighbours when an endpoint of one coincides with an endpoint
of the other.  Crossings without a shared endpoint (bridges, underpasses)
are therefore never linked.  All coordinates are assumed to be projected
and in metres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

LENGTH_RTOL = 1e-6


def polyline_length(coords) -> float:
    coords = np.asarray(coords, dtype=float)
    return float(np.sum(np.hypot(*np.diff(coords, axis=0).T)))


@dataclass(frozen=True)
class Segment:
    id: str
    polyline: np.ndarray
    length_m: float | None = None
    road_class: str = ""
    speed_limit_kmh: float = float("nan")
    properties: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        coords = np.asarray(self.polyline, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
            raise ValueError(f"segment {self.id!r}: polyline needs at least 2 (x, y) points")
        if not np.all(np.isfinite(coords)):
            raise ValueError(f"segment {self.id!r}: non-finite coordinates")
        object.__setattr__(self, "polyline", coords)
        geom = polyline_length(coords)
        if self.length_m is None:
            object.__setattr__(self, "length_m", geom)
        elif abs(self.length_m - geom) > LENGTH_RTOL * max(geom, 1e-12):
            raise ValueError(
                f"segment {self.id!r}: length {self.length_m} disagrees with geometry {geom}"
            )
        if not self.length_m > 0:
            raise ValueError(f"segment {self.id!r}: zero length")

    @property
    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return self.polyline[0], self.polyline[-1]


@dataclass(eq=False)
class SegmentNetwork:
    segments: tuple
    edges: np.ndarray  # (m, 2) int, i < j, lexicographically sorted
    component_label: np.ndarray
    n_components: int

    @classmethod
    def from_edges(cls, segments: Sequence[Segment], edges) -> "SegmentNetwork":
        segments = tuple(segments)
        n = len(segments)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError("edge index out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise ValueError("adjacency must be irreflexive")
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0) if e.size else e
        labels, k = _components(n, e)
        return cls(segments=segments, edges=e, component_label=labels, n_components=k)

    @property
    def n(self) -> int:
        return len(self.segments)

    @cached_property
    def ids(self) -> list[str]:
        return [s.id for s in self.segments]

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([s.length_m for s in self.segments])

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.n
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i), dtype=np.int8)
        return sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    def neighbours(self, i: int) -> np.ndarray:
        A = self.adjacency
        return A.indices[A.indptr[i]:A.indptr[i + 1]]

    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.component_label, minlength=self.n_components)

    def subset(self, keep) -> "SegmentNetwork":
        """Induced sub-network on the (sorted) index set ``keep``."""
        keep = np.asarray(sorted(set(int(k) for k in keep)), dtype=np.int64)
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        e = remap[self.edges] if self.edges.size else self.edges
        e = e[np.all(e >= 0, axis=1)] if e.size else e.reshape(0, 2)
        return SegmentNetwork.from_edges([self.segments[k] for k in keep], e)

    def summary(self) -> dict:
        L = self.lengths
        return {
            "n_segments": self.n,
            "n_components": self.n_components,
            "n_edges": int(len(self.edges)),
            "length_total_m": float(L.sum()),
            "length_mean_m": float(L.mean()),
            "length_sd_m": float(L.std(ddof=1)) if self.n > 1 else 0.0,
            "length_min_m": float(L.min()),
            "length_max_m": float(L.max()),
        }


def _components(n: int, edges: np.ndarray) -> tuple[np.ndarray, int]:
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0
    A = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    k, labels = connected_components(A, directed=False)
    # relabel in order of first appearance so labels do not depend on the solver
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    return relabel[labels].astype(np.int64), int(k)


def build_adjacency(segments: Sequence[Segment], tolerance_m: float = 0.0) -> SegmentNetwork:
    """Link segments whose endpoints coincide (within ``tolerance_m``)."""
    segments = tuple(segments)
    seen: dict[str, int] = {}
    for i, s in enumerate(segments):
        if s.id in seen:
            raise ValueError(f"duplicate segment id {s.id!r}")
        seen[s.id] = i
    n = len(segments)
    pts = np.array([p for s in segments for p in s.endpoints]).reshape(-1, 2)
    owner = np.repeat(np.arange(n), 2)
    pairs = set()
    if tolerance_m > 0:
        tree = cKDTree(pts)
        for a, b in tree.query_pairs(r=tolerance_m):
            i, j = owner[a], owner[b]
            if i != j:
                pairs.add((min(i, j), max(i, j)))
    else:
        groups: dict[tuple[float, float], list[int]] = {}
        for k, (x, y) in enumerate(pts):
            groups.setdefault((float(x), float(y)), []).append(int(owner[k]))
        for members in groups.values():
            members = sorted(set(members))
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    pairs.add((members[a], members[b]))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return SegmentNetwork.from_edges(segments, edges)


@dataclass(frozen=True)
class PruneReport:
    retained: int
    removed: int
    removed_component_sizes: tuple


def prune_components(network: SegmentNetwork, policy: str = "keep-largest",
                     min_size: int | None = None) -> tuple[SegmentNetwork, PruneReport]:
    """Drop small connected components.

    ``policy`` is ``"keep-largest"`` or ``"min-size"`` (with ``min_size``).
    """
    sizes = network.component_sizes()
    if policy == "keep-largest":
        keep_labels = {int(np.argmax(sizes))} if sizes.size else set()
    elif policy == "min-size":
        if min_size is None:
            raise ValueError("min-size policy needs min_size")
        keep_labels = {c for c, s in enumerate(sizes) if s >= min_size}
    else:
        raise ValueError(f"unknown pruning policy {policy!r}")
    if not keep_labels:
        raise ValueError("pruning removed every component")
    mask = np.isin(network.component_label, sorted(keep_labels))
    removed_sizes = tuple(sorted((int(s) for c, s in enumerate(sizes) if c not in keep_labels),
                                 reverse=True))
    pruned = network.subset(np.flatnonzero(mask))
    return pruned, PruneReport(retained=int(mask.sum()), removed=int((~mask).sum()),
                               removed_component_sizes=removed_sizes)


@dataclass(frozen=True)
class EventAssignment:
    event_id: str
    segment_index: int | None
    snap_distance_m: float


def _pieces(network: SegmentNetwork):
    starts, ends, owner = [], [], []
    for i, s in enumerate(network.segments):
        c = s.polyline
        starts.append(c[:-1])
        ends.append(c[1:])
        owner.append(np.full(len(c) - 1, i))
    return np.vstack(starts), np.vstack(ends), np.concatenate(owner)


def point_segment_distance(points, a, b):
    """Distances (and projections) from points (k, 2) to line pieces a-b (m, 2).

    Returns ``(dist, proj)`` with shapes (k, m) and (k, m, 2).
    """
    points = np.asarray(points, dtype=float)[:, None, :]
    ab = (b - a)[None, :, :]
    denom = np.einsum("...i,...i->...", ab, ab)
    t = np.einsum("kmi,kmi->km", points - a[None], np.broadcast_to(ab, (points.shape[0],) + ab.shape[1:]))
    t = np.clip(np.divide(t, denom, out=np.zeros_like(t), where=denom > 0), 0.0, 1.0)
    proj = a[None] + t[..., None] * ab
    return np.hypot(*(points - proj).transpose(2, 0, 1)), proj


def snap_events(points, network: SegmentNetwork, tolerance_m: float = 10.0,
                event_ids: Sequence[str] | None = None, chunk: int = 256,
                return_projection: bool = False):
    """Assign each point to its nearest segment, or leave it unassigned.

    Distance is the true point-to-polyline distance.  Equidistant segments
    resolve to the lowest segment index.
    """
    if not tolerance_m > 0:
        raise ValueError("tolerance_m must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if event_ids is None:
        event_ids = [str(k) for k in range(len(pts))]
    if len(pts) == 0:
        return ([], np.zeros((0, 2))) if return_projection else []
    a, b, owner = _pieces(network)
    # pieces are grouped by owner in increasing order
    bounds = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
    ends_ = np.r_[bounds[1:], len(owner)]
    chunk = max(1, min(chunk, 2_000_000 // len(owner)))
    out: list[EventAssignment] = []
    projections = np.zeros((len(pts), 2))
    for lo in range(0, len(pts), chunk):
        block = pts[lo:lo + chunk]
        dist, proj = point_segment_distance(block, a, b)
        seg_min = np.minimum.reduceat(dist, bounds, axis=1)
        best_seg = np.argmin(seg_min, axis=1)
        best_d = seg_min[np.arange(len(block)), best_seg]
        for r in range(len(block)):
            seg = int(best_seg[r])
            pieces = np.arange(bounds[seg], ends_[seg])
            piece = pieces[np.argmin(dist[r, pieces])]
            projections[lo + r] = proj[r, piece]
            d = float(best_d[r])
            out.append(EventAssignment(str(event_ids[lo + r]), seg if d <= tolerance_m else None, d))
    if return_projection:
        return out, projections
    return out


def count_events(assignments: Sequence[EventAssignment], network: SegmentNetwork) -> np.ndarray:
    idx = [a.segment_index for a in assignments if a.segment_index is not None]
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= network.n):
        raise ValueError("assignment references a segment outside the network")
    return np.bincount(idx, minlength=network.n).astype(np.int64)


@dataclass
class PolygonCovariateLayer:
    """Polygons (exterior ring plus optional holes) with numeric attributes."""

    rings: list  # list of list-of-rings; first ring exterior
    attributes: list  # list of dicts of finite floats

    def __post_init__(self):
        if len(self.rings) != len(self.attributes):
            raise ValueError("one attribute record per polygon required")
        for k, poly in enumerate(self.rings):
            for ring in poly:
                ring = np.asarray(ring, dtype=float)
                if ring.shape[0] < 4 or not np.array_equal(ring[0], ring[-1]):
                    raise ValueError(f"polygon {k}: ring is not closed")
        for k, rec in enumerate(self.attributes):
            for name, v in rec.items():
                if not np.isfinite(float(v)):
                    raise ValueError(f"polygon {k}: attribute {name!r} is not finite")

    @classmethod
    def from_rectangles(cls, boxes, attributes) -> "PolygonCovariateLayer":
        rings = []
        for x0, y0, x1, y1 in boxes:
            rings.append([np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]], float)])
        return cls(rings, list(attributes))

    def geometries(self):
        from shapely.geometry import Polygon

        return [Polygon(poly[0], poly[1:]) for poly in self.rings]


@dataclass
class OverlayResult:
    polygon_index: np.ndarray  # -1 where the segment meets no polygon
    fraction: np.ndarray
    records: list  # attribute dict or None per segment

    @property
    def missing(self) -> np.ndarray:
        return np.flatnonzero(self.polygon_index < 0)


def overlay_covariates(network: SegmentNetwork, layer: PolygonCovariateLayer,
                       tie_rtol: float = 1e-9) -> OverlayResult:
    """Give each segment the attributes of the polygon covering most of its length."""
    from shapely import STRtree
    from shapely.geometry import LineString

    polys = layer.geometries()
    tree = STRtree(polys)
    index = np.full(network.n, -1, dtype=np.int64)
    frac = np.zeros(network.n)
    records: list = [None] * network.n
    for i, seg in enumerate(network.segments):
        line = LineString(seg.polyline)
        cands = sorted(int(c) for c in tree.query(line))
        best, best_len = -1, 0.0
        for c in cands:
            inter = line.intersection(polys[c]).length
            if inter > best_len * (1.0 + tie_rtol) and inter > 0:
                best, best_len = c, inter
        if best >= 0:
            index[i] = best
            frac[i] = best_len / seg.length_m
            records[i] = dict(layer.attributes[best])
    return OverlayResult(index, frac, records)
