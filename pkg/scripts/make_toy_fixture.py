"""Write the small GeoJSON network used by the test suite.

A 5 x 5 street grid with 100 m blocks in British National Grid coordinates,
a detached two-segment spur (pruned by keep-largest), one segment outside
every polygon, four covariate polygons, and events near the streets with one
event 25 m from any street.
"""

import json
import sys
from pathlib import Path

import numpy as np

X0, Y0, STEP = 430000.0, 433000.0, 100.0


def main(out: Path) -> None:
    rng = np.random.default_rng(11)
    out.mkdir(parents=True, exist_ok=True)
    feats, k = [], 0

    def seg(a, b, frc, speed):
        nonlocal k
        sid = f"L{k:03d}"
        k += 1
        traffic = float(np.round(np.exp(rng.normal(6.0 - 0.4 * frc, 0.5)), 1))
        feats.append({"type": "Feature",
                      "properties": {"id": sid, "frc": str(frc), "speed_kmh": speed, "traffic": traffic},
                      "geometry": {"type": "LineString", "coordinates": [list(a), list(b)]}})

    for r in range(5):
        for c in range(4):
            frc = 3 if r == 2 else 5
            seg((X0 + c * STEP, Y0 + r * STEP), (X0 + (c + 1) * STEP, Y0 + r * STEP), frc,
                int(rng.choice([48, 64])) if frc == 3 else int(rng.choice([32, 48])))
    for c in range(5):
        for r in range(4):
            frc = 4 if c == 2 else 5
            # a kink in the middle so that polylines with more than two vertices are exercised
            a = (X0 + c * STEP, Y0 + r * STEP)
            m = (X0 + c * STEP + 3.0, Y0 + (r + 0.5) * STEP)
            b = (X0 + c * STEP, Y0 + (r + 1) * STEP)
            frc_speed = int(rng.choice([48, 64])) if frc == 4 else int(rng.choice([32, 48]))
            sid = f"L{k:03d}"
            k += 1
            traffic = float(np.round(np.exp(rng.normal(6.0 - 0.4 * frc, 0.5)), 1))
            feats.append({"type": "Feature",
                          "properties": {"id": sid, "frc": str(frc), "speed_kmh": frc_speed, "traffic": traffic},
                          "geometry": {"type": "LineString", "coordinates": [list(a), list(m), list(b)]}})
    # detached spur inside the polygons
    seg((X0 + 150.0, Y0 + 450.0), (X0 + 250.0, Y0 + 450.0), 5, 32)
    seg((X0 + 250.0, Y0 + 450.0), (X0 + 320.0, Y0 + 450.0), 5, 32)
    # segment outside every polygon
    seg((X0 + 900.0, Y0), (X0 + 1000.0, Y0), 5, 32)
    (out / "network.geojson").write_text(json.dumps({"type": "FeatureCollection", "features": feats}, indent=1))

    polys = []
    quads = [(X0 - 10, X0 + 210, Y0 - 10, Y0 + 210, 3100.0, 0.21, 0.08),
             (X0 + 210, X0 + 410, Y0 - 10, Y0 + 210, 5200.0, 0.34, 0.05),
             (X0 - 10, X0 + 210, Y0 + 210, Y0 + 470, 2400.0, 0.30, 0.11),
             (X0 + 210, X0 + 410, Y0 + 210, Y0 + 470, 4600.0, 0.18, 0.07)]
    for j, (x_lo, x_hi, y_lo, y_hi, dens, young, home) in enumerate(quads):
        ring = [[x_lo, y_lo], [x_hi, y_lo], [x_hi, y_hi], [x_lo, y_hi], [x_lo, y_lo]]
        polys.append({"type": "Feature",
                      "properties": {"lsoa": f"E0100{j}", "pop_density": dens, "young_ratio": young,
                                     "home_worker_ratio": home},
                      "geometry": {"type": "Polygon", "coordinates": [ring]}})
    (out / "polygons.geojson").write_text(json.dumps({"type": "FeatureCollection", "features": polys}, indent=1))

    pts = []
    for e in range(60):
        f = feats[int(rng.integers(0, 40))]
        c = np.asarray(f["geometry"]["coordinates"])
        t = rng.uniform(0.05, 0.95)
        p = c[0] + t * (c[-1] - c[0]) if len(c) == 2 else c[1]
        p = p + rng.uniform(-4.0, 4.0, size=2)
        pts.append({"type": "Feature", "properties": {"id": f"E{e:03d}"},
                    "geometry": {"type": "Point", "coordinates": [round(float(p[0]), 2), round(float(p[1]), 2)]}})
    pts.append({"type": "Feature", "properties": {"id": "E_far"},
                "geometry": {"type": "Point", "coordinates": [X0 + 50.0, Y0 + 25.0]}})
    (out / "events.geojson").write_text(json.dumps({"type": "FeatureCollection", "features": pts}, indent=1))


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "tests" / "fixtures")
