"""Ingest the toy fixture, then run the built-in seven-column prior sensitivity design.

A worked example of the full command-line workflow.  Outputs go to
``results/sensitivity`` unless ``--out`` says otherwise.

    python3 scripts/run_sensitivity.py --variant classical_me
"""

import argparse
import sys
from pathlib import Path

from netme.cli import main as netme

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="classical_me", choices=("classical_me", "spatial_me"))
    ap.add_argument("--fixtures", type=Path, default=FIXTURES)
    ap.add_argument("--iterations", default="3000")
    ap.add_argument("--burnin", default="1000")
    ap.add_argument("--out", type=Path, default=Path("results/sensitivity"))
    args = ap.parse_args()

    bundle = args.out / "bundle"
    code = netme(["ingest", "--network", str(args.fixtures / "network.geojson"),
                  "--events", str(args.fixtures / "events.geojson"),
                  "--polygons", str(args.fixtures / "polygons.geojson"), "--out", str(bundle)])
    if code:
        return code
    return netme(["sensitivity", "--bundle", str(bundle), "--variant", args.variant, "--standard-design",
                  "--iterations", args.iterations, "--burnin", args.burnin, "--thin", "2", "--chains", "2",
                  "--seed", "1", "--out", str(args.out / args.variant)])


if __name__ == "__main__":
    sys.exit(main())
