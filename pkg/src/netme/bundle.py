"""GeoJSON input, the ingest pipeline, and the on-disk dataset bundle.

A bundle is a directory of plain files:

    counts.csv            segment_id, count, offset
    covariates.csv        segment_id, w, regression columns, exposure columns
    adjacency.csv         segment_id_a, segment_id_b
    standardization.json  column roles and (mean, sd) of every standardized column
    manifest.json         sha256 of every file above and of the inputs
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lattice import (
    PolygonCovariateLayer,
    Segment,
    SegmentNetwork,
    build_adjacency,
    count_events,
    overlay_covariates,
    prune_components,
    snap_events,
)
from .model import Dataset, dummy_code, standardize

BUNDLE_FILES = ("counts.csv", "covariates.csv", "adjacency.csv", "standardization.json")


class InputError(ValueError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# GeoJSON


def _features(path, kinds: tuple) -> list[dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc.msg})") from None
    feats = doc.get("features") if isinstance(doc, dict) else None
    if feats is None:
        raise InputError(f"{path}: not a GeoJSON FeatureCollection")
    for k, f in enumerate(feats):
        g = f.get("geometry") or {}
        if g.get("type") not in kinds:
            raise InputError(f"{path}: feature {k} has geometry {g.get('type')!r}, expected {kinds}")
    return feats


def _check_projected(coords: np.ndarray, path) -> None:
    if coords.size and np.all(np.abs(coords[:, 0]) <= 180) and np.all(np.abs(coords[:, 1]) <= 90):
        raise InputError(f"{path}: coordinates look like longitude/latitude; projected coordinates required")


def read_segments(path, proxy: str | None = "traffic") -> tuple[list[Segment], list[dict]]:
    feats = _features(path, ("LineString",))
    segs, props = [], []
    allc = []
    for k, f in enumerate(feats):
        p = dict(f.get("properties") or {})
        sid = str(p.get("id", f.get("id", k)))
        coords = np.asarray(f["geometry"]["coordinates"], dtype=float)[:, :2]
        allc.append(coords)
        segs.append(Segment(
            id=sid, polyline=coords,
            road_class=str(p["frc"]) if p.get("frc") is not None else None,
            speed_limit_kmh=float(p["speed_kmh"]) if p.get("speed_kmh") is not None else None,
            properties={kk: vv for kk, vv in p.items() if kk not in ("id",)},
        ))
        if proxy is not None and proxy not in p:
            raise InputError(f"{path}: segment {sid!r} lacks the proxy property {proxy!r}")
        props.append(p)
    _check_projected(np.vstack(allc) if allc else np.zeros((0, 2)), path)
    return segs, props


def read_points(path) -> tuple[np.ndarray, list[str]]:
    feats = _features(path, ("Point",))
    pts = np.array([f["geometry"]["coordinates"][:2] for f in feats], dtype=float).reshape(-1, 2)
    ids = [str((f.get("properties") or {}).get("id", f.get("id", k))) for k, f in enumerate(feats)]
    _check_projected(pts, path)
    return pts, ids


def read_polygons(path) -> PolygonCovariateLayer:
    feats = _features(path, ("Polygon", "MultiPolygon"))
    rings, attrs, allc = [], [], []
    for f in feats:
        g = f["geometry"]
        rec = {k: float(v) for k, v in (f.get("properties") or {}).items()
               if isinstance(v, (int, float)) and not isinstance(v, bool)}
        parts = [g["coordinates"]] if g["type"] == "Polygon" else g["coordinates"]
        for part in parts:
            rr = [np.asarray(r, dtype=float)[:, :2] for r in part]
            allc.extend(rr)
            rings.append(rr)
            attrs.append(rec)
    _check_projected(np.vstack(allc) if allc else np.zeros((0, 2)), path)
    return PolygonCovariateLayer(rings, attrs)


def write_network_geojson(network: SegmentNetwork, path, extra: dict | None = None) -> None:
    feats = []
    for i, s in enumerate(network.segments):
        props = {"id": s.id}
        if s.road_class is not None:
            props["frc"] = s.road_class
        if s.speed_limit_kmh is not None:
            props["speed_kmh"] = s.speed_limit_kmh
        if extra:
            props.update({k: v[i] for k, v in extra.items()})
        feats.append({"type": "Feature", "properties": props,
                      "geometry": {"type": "LineString", "coordinates": np.asarray(s.polyline).tolist()}})
    Path(path).write_text(dumps({"type": "FeatureCollection", "features": feats}))


# ---------------------------------------------------------------------------
# bundle


@dataclass
class Bundle:
    data: Dataset
    segment_ids: list
    edges: np.ndarray  # index pairs into segment_ids
    meta: dict

    @property
    def network_like(self):
        """Minimal object with ``n`` and ``edges`` for building the ICAR structure."""
        return _EdgeView(len(self.segment_ids), self.edges)


@dataclass
class _EdgeView:
    n: int
    edges: np.ndarray


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow(r)
    return buf.getvalue()


def write_bundle(directory, data: Dataset, segment_ids: list, edges: np.ndarray, meta: dict,
                 inputs: dict | None = None) -> dict:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ids = [str(s) for s in segment_ids]
    texts = {
        "counts.csv": _csv_text(["segment_id", "count", "offset"],
                                ([ids[i], int(data.y[i]), fmt(data.e[i])] for i in range(data.n))),
        "covariates.csv": _csv_text(
            ["segment_id", "w"] + [f"z:{c}" for c in data.z_names] + [f"ztilde:{c}" for c in data.ztilde_names],
            ([ids[i], fmt(data.w[i])] + [fmt(v) for v in data.Z[i]] + [fmt(v) for v in data.Ztilde[i]]
             for i in range(data.n))),
        "adjacency.csv": _csv_text(["segment_id_a", "segment_id_b"], ([ids[a], ids[b]] for a, b in edges)),
        "standardization.json": dumps({"columns": data.standardization, **meta}),
    }
    for name, txt in texts.items():
        (out / name).write_text(txt)
    manifest = {"files": {name: hashlib.sha256(txt.encode()).hexdigest() for name, txt in texts.items()},
                "inputs": inputs or {}, "data_digest": data.digest()}
    (out / "manifest.json").write_text(dumps(manifest))
    return manifest


def read_bundle(directory) -> Bundle:
    src = Path(directory)
    for name in BUNDLE_FILES:
        if not (src / name).exists():
            raise InputError(f"bundle {src} lacks {name}")
    with open(src / "counts.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["segment_id"] for r in rows]
    y = np.array([int(r["count"]) for r in rows], dtype=np.int64)
    e = np.array([float(r["offset"]) for r in rows])
    with open(src / "covariates.csv", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        cov_rows = list(rd)
    if [r[0] for r in cov_rows] != ids:
        raise InputError("covariates.csv and counts.csv list different segments")
    M = np.array([[float(v) for v in r[1:]] for r in cov_rows]).reshape(len(ids), len(header) - 1)
    cols = header[1:]
    zc = [k for k, c in enumerate(cols) if c.startswith("z:")]
    tc = [k for k, c in enumerate(cols) if c.startswith("ztilde:")]
    std = json.loads((src / "standardization.json").read_text())
    pos = {s: k for k, s in enumerate(ids)}
    with open(src / "adjacency.csv", newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        try:
            edges = np.array([[pos[a], pos[b]] for a, b in rd], dtype=np.int64).reshape(-1, 2)
        except KeyError as exc:
            raise InputError(f"adjacency.csv references unknown segment {exc.args[0]!r}") from None
    data = Dataset(
        y=y, e=e, w=M[:, cols.index("w")], Z=M[:, zc], Ztilde=M[:, tc],
        z_names=[cols[k][2:] for k in zc], ztilde_names=[cols[k][7:] for k in tc],
        standardization=std.get("columns", {}), segment_ids=ids,
    )
    meta = {k: v for k, v in std.items() if k != "columns"}
    return Bundle(data, ids, edges, meta)


def bundle_digest(directory) -> str:
    return sha256_file(Path(directory) / "manifest.json")


# ---------------------------------------------------------------------------
# ingest


@dataclass
class IngestResult:
    network: SegmentNetwork
    data: Dataset
    assignments: list
    report: dict
    meta: dict


def _numeric_column(values, name: str, std: dict, cols: list, names: list, report: dict) -> None:
    v = np.asarray(values, dtype=float)
    if v.size < 2 or np.std(v) == 0:
        report.setdefault("dropped_constant_columns", []).append(name)
        return
    z, m, s = standardize(v)
    std[name] = {"kind": "numeric", "mean": m, "sd": s}
    cols.append(z)
    names.append(name)


def ingest(network_path, events_path, polygons_path, proxy: str = "traffic", tolerance_m: float = 10.0,
           snap_tolerance_m: float = 0.0, prune_policy: str = "keep-largest", min_size: int = 1,
           proxy_label: str = "Road traffic") -> IngestResult:
    """Overlay, drop uncovered segments, build adjacency, prune, snap and count."""
    segs, props = read_segments(network_path, proxy=proxy)
    points, event_ids = read_points(events_path)
    layer = read_polygons(polygons_path)
    report: dict = {"segments_read": len(segs), "events_read": len(event_ids)}

    full = SegmentNetwork.from_edges(segs, np.zeros((0, 2), dtype=np.int64))
    ov = overlay_covariates(full, layer)
    covered = [i for i in range(full.n) if ov.polygon_index[i] >= 0]
    report["segments_without_polygon"] = [segs[i].id for i in ov.missing]
    segs_c = [segs[i] for i in covered]
    props_c = [props[i] for i in covered]
    recs_c = [ov.records[i] for i in covered]
    if not segs_c:
        raise InputError("no segment intersects any polygon")

    net = build_adjacency(segs_c, tolerance_m=snap_tolerance_m)
    report["components_found"] = int(net.n_components)
    net, pr = prune_components(net, policy=prune_policy, min_size=min_size)
    keep_ids = set(net.ids)
    sel = [k for k, s in enumerate(segs_c) if s.id in keep_ids]
    props_k = [props_c[k] for k in sel]
    recs_k = [recs_c[k] for k in sel]
    report["segments_pruned"] = int(pr.removed)
    report["pruned_component_sizes"] = [int(v) for v in pr.removed_component_sizes]

    assignments = snap_events(points, net, tolerance_m=tolerance_m, event_ids=event_ids)
    y = count_events(assignments, net)
    dropped = sum(1 for a in assignments if a.segment_index is None)
    report["events_assigned"] = len(assignments) - dropped
    report["events_dropped"] = dropped
    report["events_dropped_message"] = f"{dropped} event{'s' if dropped != 1 else ''} dropped (>{tolerance_m:g} m)"
    report["segments"] = net.n
    report["components"] = net.n_components

    std: dict = {}
    zcols, znames, tcols, tnames = [], [], [], []
    frc = [s.road_class for s in net.segments]
    if all(v is not None for v in frc) and len(set(frc)) > 1:
        D, levels = dummy_code(frc)
        ref = sorted(set(frc) - set(levels))[0]
        for j, lv in enumerate(levels):
            nm = f"frc_{lv}"
            std[nm] = {"kind": "dummy", "reference": f"frc_{ref}"}
            zcols.append(D[:, j])
            znames.append(nm)
            tcols.append(D[:, j])
            tnames.append(nm)
    speeds = [s.speed_limit_kmh for s in net.segments]
    if all(v is not None for v in speeds):
        before = len(zcols)
        _numeric_column(speeds, "speed_kmh", std, zcols, znames, report)
        if len(zcols) > before:
            tcols.append(zcols[-1])
            tnames.append("speed_kmh")
    attr_names = sorted({k for r in recs_k for k in r})
    for nm in attr_names:
        vals = [r.get(nm, np.nan) for r in recs_k]
        if not np.all(np.isfinite(vals)):
            raise InputError(f"polygon attribute {nm!r} is missing for some segments")
        _numeric_column(vals, nm, std, zcols, znames, report)
    raw_w = np.array([float(p[proxy]) for p in props_k])
    if raw_w.size > 1 and np.std(raw_w) > 0:
        w, wm, ws = standardize(raw_w)
    else:
        w, wm, ws = raw_w - raw_w.mean(), float(raw_w.mean()), 1.0
    std["w"] = {"kind": "numeric" if raw_w.size > 1 and np.std(raw_w) > 0 else "raw", "mean": wm, "sd": ws}
    n = net.n
    if zcols:
        design = np.column_stack([np.ones(n)] + zcols)
        if np.linalg.matrix_rank(design) < design.shape[1]:
            report["warnings"] = report.get("warnings", []) + ["regression covariates are collinear"]
    data = Dataset(
        y=y, e=net.lengths, w=w,
        Z=np.column_stack(zcols) if zcols else np.zeros((n, 0)),
        Ztilde=np.column_stack(tcols) if tcols else np.zeros((n, 0)),
        z_names=znames, ztilde_names=tnames, standardization=std, segment_ids=net.ids,
    )
    meta = {"proxy": proxy, "proxy_label": proxy_label, "offset_unit": "m"}
    return IngestResult(net, data, assignments, report, meta)


def write_ingest(result: IngestResult, directory, inputs: dict) -> dict:
    out = Path(directory)
    manifest = write_bundle(out, result.data, result.network.ids, result.network.edges, result.meta, inputs)
    ids = result.network.ids
    rows = []
    for a in result.assignments:
        rows.append([a.event_id, ids[a.segment_index] if a.segment_index is not None else "", fmt(a.snap_distance_m)])
    extra = {
        "assignments.csv": _csv_text(["event_id", "segment_id", "distance_m"], rows),
        "network_summary.json": dumps(result.network.summary()),
        "ingest_report.json": dumps(result.report),
    }
    for name, txt in extra.items():
        (out / name).write_text(txt)
        manifest["files"][name] = hashlib.sha256(txt.encode()).hexdigest()
    (out / "manifest.json").write_text(dumps(manifest))
    return manifest
