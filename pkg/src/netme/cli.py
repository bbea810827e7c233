"""Command-line interface: ingest, simulate, fit, compare, sensitivity, export.

Configuration files are JSON with optional sections ``data``, ``model``,
``priors``, ``sampler`` and ``output``; command-line flags override them.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import (
    InputError,
    _csv_text,
    dumps,
    fmt,
    ingest,
    read_bundle,
    sha256_file,
    write_bundle,
    write_ingest,
    write_network_geojson,
)
from .gmrf import NotPositiveDefiniteError, icar_structure
from .inference import MapConvergenceError, SamplerConfig, SamplerDivergence, run_mcmc
from .model import VARIANTS, ModelError, ModelSpec, default_priors
from .priors import PriorSpec
from .selection import compare, dic, predicted_vs_observed, summarize, waic
from .sim import SimScenario, simulate_dataset

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# The built-in sensitivity design: a default column plus six single-prior changes.
STANDARD_DESIGN = [
    {"name": "default", "priors": {}},
    {"name": "beta_x N(0,10)", "priors": {"beta_x": {"family": "normal", "mean": 0, "variance": 10}}},
    {"name": "beta_x N(0,100)", "priors": {"beta_x": {"family": "normal", "mean": 0, "variance": 100}}},
    {"name": "tau_eps PC(2,0.1)", "priors": {"tau_eps": {"family": "pc_precision", "sigma0": 2, "alpha": 0.1}}},
    {"name": "tau_eps PC(0.5,0.1)", "priors": {"tau_eps": {"family": "pc_precision", "sigma0": 0.5, "alpha": 0.1}}},
    {"name": "tau_u PC(3,0.1)", "priors": {"tau_u": {"family": "pc_precision", "sigma0": 3, "alpha": 0.1}}},
    {"name": "tau_u PC(1,0.1)", "priors": {"tau_u": {"family": "pc_precision", "sigma0": 1, "alpha": 0.1}}},
]


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path}: top level must be an object")
    unknown = set(cfg) - {"data", "model", "priors", "sampler", "output"}
    if unknown:
        raise CliError(f"config {path}: unknown sections {sorted(unknown)}")
    return cfg


def sampler_from(cfg: dict, args) -> SamplerConfig:
    rec = dict(cfg.get("sampler", {}))
    for flag, key in (("iterations", "n_iterations"), ("burnin", "n_burnin"), ("thin", "thinning"),
                      ("chains", "n_chains"), ("seed", "rng_seed"), ("workers", "n_workers")):
        v = getattr(args, flag, None)
        if v is not None:
            rec[key] = v
    try:
        return SamplerConfig(**rec)
    except TypeError as exc:
        raise CliError(f"sampler section: {exc}") from None


def priors_from(variant: str, overrides: dict, include_theta: bool = True) -> dict:
    pri = default_priors(variant, include_theta)
    for name, rec in (overrides or {}).items():
        pri[name] = PriorSpec.from_dict(rec)
    return pri


def spec_from(cfg: dict, args) -> ModelSpec:
    model = dict(cfg.get("model", {}))
    variant = getattr(args, "variant", None) or model.get("variant", "baseline")
    include = bool(model.get("include_spatial_theta", True))
    pri = priors_from(variant, cfg.get("priors", {}), include)
    # priors for blocks the variant lacks are ignored rather than rejected
    spec0 = ModelSpec(variant=variant, priors=default_priors(variant, include), include_spatial_theta=include)
    allowed = spec0.required_priors()
    pri = {k: v for k, v in pri.items() if k.split("[")[0] in allowed}
    return ModelSpec(variant=variant, priors=pri, include_spatial_theta=include)


# ---------------------------------------------------------------------------
# commands


def _inputs_digest(paths: dict) -> dict:
    return {k: sha256_file(v) for k, v in sorted(paths.items())}


def cmd_ingest(args) -> int:
    cfg = load_config(args.config).get("data", {})
    network = args.network or cfg.get("network")
    events = args.events or cfg.get("events")
    polygons = args.polygons or cfg.get("polygons")
    if not (network and events and polygons):
        raise CliError("ingest needs --network, --events and --polygons")
    prune = args.prune or cfg.get("prune", "keep-largest")
    min_size = 1
    if prune.startswith("min-size:"):
        min_size = int(prune.split(":", 1)[1])
        prune = "min-size"
    res = ingest(network, events, polygons, proxy=args.proxy or cfg.get("proxy", "traffic"),
                 tolerance_m=args.tolerance if args.tolerance is not None else cfg.get("tolerance_m", 10.0),
                 snap_tolerance_m=args.snap_tolerance if args.snap_tolerance is not None
                 else cfg.get("snap_tolerance_m", 0.0),
                 prune_policy=prune, min_size=min_size)
    inputs = _inputs_digest({"network": network, "events": events, "polygons": polygons})
    write_ingest(res, args.out, inputs)
    print(res.report["events_dropped_message"])
    print(f"{res.network.n} segments in {res.network.n_components} component(s); bundle written to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    rec = dict(cfg.get("data", {}).get("scenario", {}))
    if args.variant:
        rec["variant"] = args.variant
    if args.seed is not None:
        rec["seed"] = args.seed
    if args.rows:
        rec["rows"] = args.rows
    if args.cols:
        rec["cols"] = args.cols
    scen = SimScenario.from_dict(rec)
    data, truth, net = simulate_dataset(scen)
    out = Path(args.out)
    write_bundle(out, data, net.ids, net.edges, {"proxy": "w", "proxy_label": "Proxy", "offset_unit": "km"},
                 {"scenario": scen.to_dict()})
    tr = {"scenario": scen.to_dict(), "beta": truth.beta.tolist(), "alpha": truth.alpha.tolist(),
          "x": truth.x.tolist(), "theta": truth.theta.tolist(),
          "phi": truth.phi.tolist() if truth.phi is not None else None}
    (out / "truth.json").write_text(dumps(tr))
    write_network_geojson(net, out / "network.geojson")
    print(f"simulated {data.n} sites, {int(data.y.sum())} events; bundle written to {out}")
    return EXIT_OK


def _labels(samples, data, meta: dict) -> dict:
    lab = {"beta0": "Intercept", "beta_x": meta.get("proxy_label", "Proxy")}
    for nm in data.z_names:
        lab[f"beta[{nm}]"] = nm
    return lab


def _criteria(samples, data, spec) -> dict:
    out = {"model": spec.variant, "data_digest": data.digest()}
    for blocks in ("outcome", "augmented"):
        d = dic(samples, data, spec, blocks)
        w = waic(samples, data, spec, blocks)
        out[blocks] = {"dic": d.dic, "p_d": d.p_d, "waic": w.waic, "p_waic": w.p_waic}
    return out


def _write_fit(samples, data, spec, bundle, out: Path) -> dict:
    samples.save(out / "chains")
    sm = summarize(samples, data, spec, blocks="outcome")
    # table order: intercept, road-class dummies and other covariates, the exposure, then the rest
    first = ["beta0"] + [f"beta[{nm}]" for nm in data.z_names] + ["beta_x"]
    order = [nm for nm in first if nm in sm.parameters] + [nm for nm in sm.parameters if nm not in first]
    sm.parameters = {nm: sm.parameters[nm] for nm in order}
    labels = _labels(samples, data, bundle.meta)
    rows = sm.rows(labels)
    keys = ["parameter", "label", "mean", "sd", "q05", "q95", "ess_bulk", "rhat", "mcse"]
    (out / "summary.csv").write_text(_csv_text(keys, ([r.get(k, "") for k in keys] for r in rows)))
    (out / "summary.txt").write_text(sm.text_table(labels))
    (out / "lambda.csv").write_text(_csv_text(
        ["segment_id", "lambda_mean", "lambda_q05", "lambda_q95"],
        ([sid, fmt(a), fmt(b), fmt(c)] for sid, a, b, c in
         zip(bundle.segment_ids, sm.lambda_mean, sm.lambda_q05, sm.lambda_q95))))
    pvo = predicted_vs_observed(samples, data, spec)
    (out / "predicted_vs_observed.csv").write_text(_csv_text(
        ["count_class", "observed", "predicted"], ([r["count_class"], r["observed"], fmt(r["predicted"])] for r in pvo)))
    crit = _criteria(samples, data, spec)
    (out / "criteria.json").write_text(dumps(crit))
    return crit


def _fit_manifest(out: Path, bundle_dir: Path, spec: ModelSpec, config: SamplerConfig) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    man = {
        "bundle_manifest_sha256": sha256_file(bundle_dir / "manifest.json"),
        "model": {"variant": spec.variant, "include_spatial_theta": spec.include_spatial_theta,
                  "priors": {k: v.to_dict() for k, v in sorted(spec.priors.items())}},
        "sampler": config.to_dict(),
        "files": {str(p.relative_to(out)): sha256_file(p) for p in files},
        "version": __version__,
    }
    (out / "manifest.json").write_text(dumps(man))


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    bundle_dir = Path(args.bundle or cfg.get("data", {}).get("bundle", ""))
    if not str(bundle_dir):
        raise CliError("fit needs --bundle")
    bundle = read_bundle(bundle_dir)
    spec = spec_from(cfg, args)
    config = sampler_from(cfg, args)
    icar = icar_structure(bundle.network_like)
    samples = run_mcmc(bundle.data, spec, icar, config)
    out = Path(args.out or cfg.get("output", {}).get("dir", "fit"))
    out.mkdir(parents=True, exist_ok=True)
    crit = _write_fit(samples, bundle.data, spec, bundle, out)
    _fit_manifest(out, bundle_dir, spec, config)
    print((out / "summary.txt").read_text(), end="")
    print(f"augmented DIC {crit['augmented']['dic']:.2f}  WAIC {crit['augmented']['waic']:.2f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    recs = []
    for d in args.fits:
        p = Path(d) / "criteria.json"
        if not p.exists():
            raise CliError(f"{d}: no criteria.json; is this a fit directory?")
        recs.append(json.loads(p.read_text()))
    blocks = args.blocks
    if blocks == "auto":
        blocks = "augmented" if all(r["model"] != "baseline" for r in recs) else "outcome"
    reports = [{"model": r["model"], "data_digest": r["data_digest"], **r[blocks]} for r in recs]
    for r, d in zip(reports, args.fits):
        r["model"] = f"{r['model']} ({d})"
    try:
        res = compare(reports)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    res["blocks"] = blocks
    width = max(len(r["model"]) for r in res["models"])
    print(f"criteria computed on {blocks} likelihood blocks")
    print(f"{'model':<{width}}  {'DIC':>10}  {'p_D':>8}  {'WAIC':>10}  {'p_WAIC':>8}")
    for r in res["models"]:
        print(f"{r['model']:<{width}}  {r['dic']:>10.2f}{'*' if r['best_dic'] else ' '} {r['p_d']:>8.2f}  "
              f"{r['waic']:>10.2f}{'*' if r['best_waic'] else ' '} {r['p_waic']:>8.2f}")
    if not res["criteria_agree"]:
        print("DIC and WAIC prefer different models")
    if args.out:
        Path(args.out).write_text(dumps(res))
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = load_config(args.config)
    bundle_dir = Path(args.bundle)
    bundle = read_bundle(bundle_dir)
    if args.standard_design:
        design = STANDARD_DESIGN
    elif args.sweep:
        design = json.loads(Path(args.sweep).read_text())
        if not isinstance(design, list) or not all(isinstance(c, dict) and "priors" in c for c in design):
            raise CliError("sweep file must be a list of {name, priors} objects")
    else:
        raise CliError("sensitivity needs --sweep or --standard-design")
    config = sampler_from(cfg, args)
    icar = icar_structure(bundle.network_like)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for k, cell in enumerate(design):
        name = cell.get("name", f"cell{k}")
        local = {**cfg, "priors": {**cfg.get("priors", {}), **cell["priors"]}}
        rec = {"name": name, "priors": cell["priors"]}
        try:
            spec = spec_from(local, args)
            samples = run_mcmc(bundle.data, spec, icar, config)
            sm = summarize(samples, bundle.data, spec, with_diagnostics=False)
            rec["parameters"] = {nm: {"mean": s.mean, "sd": s.sd} for nm, s in sm.parameters.items()}
            rec.update(_criteria(samples, bundle.data, spec))
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
            print(f"cell {name!r} failed: {rec['error']}", file=sys.stderr)
        cells.append(rec)
        print(f"[{k + 1}/{len(design)}] {name}{' (failed)' if 'error' in rec else ''}")
    (out / "sensitivity.json").write_text(dumps({"cells": cells}))
    names = sorted({nm for c in cells for nm in c.get("parameters", {})})
    rows = []
    for nm in names:
        row = [nm]
        for c in cells:
            p = c.get("parameters", {}).get(nm)
            row.append(f"{p['mean']:.4f} ({p['sd']:.4f})" if p else "")
        rows.append(row)
    rows.append(["DIC"] + [f"{c['outcome']['dic']:.2f}" if "outcome" in c else "" for c in cells])
    rows.append(["WAIC"] + [f"{c['outcome']['waic']:.2f}" if "outcome" in c else "" for c in cells])
    (out / "sensitivity.csv").write_text(_csv_text(["parameter"] + [c["name"] for c in cells], rows))
    return EXIT_OK


def cmd_export(args) -> int:
    net_doc = json.loads(Path(args.network).read_text())
    with open(Path(args.fit) / "lambda.csv", newline="") as fh:
        lam = {r["segment_id"]: r for r in csv.DictReader(fh)}
    feats = []
    for k, f in enumerate(net_doc.get("features", [])):
        p = f.get("properties") or {}
        sid = str(p.get("id", f.get("id", k)))
        if sid in lam:
            feats.append((sid, f))
    found = {sid for sid, _ in feats}
    orphans = sorted(set(lam) - found)
    if orphans:
        shown = ", ".join(orphans[:20]) + (" ..." if len(orphans) > 20 else "")
        raise CliError(f"{len(orphans)} fitted segment(s) missing from the network: {shown}")
    means = np.array([float(lam[sid]["lambda_mean"]) for sid, _ in feats])
    rank = np.argsort(np.argsort(means, kind="stable"), kind="stable")
    n = len(feats)
    out_feats = []
    for j, (sid, f) in enumerate(feats):
        r = lam[sid]
        props = {"segment_id": sid, "lambda_mean": float(r["lambda_mean"]),
                 "lambda_low90": float(r["lambda_q05"]), "lambda_high90": float(r["lambda_q95"]),
                 "decile": int(math.floor(10 * rank[j] / n)) + 1}
        out_feats.append({"type": "Feature", "properties": props, "geometry": f["geometry"]})
    Path(args.out).write_text(dumps({"type": "FeatureCollection", "features": out_feats}))
    print(f"wrote {n} segments to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _sampler_flags(p) -> None:
    p.add_argument("--iterations", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netme", description="Network-lattice Poisson models with measurement error.")
    ap.add_argument("--version", action="version", version=f"netme {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a dataset bundle from GeoJSON inputs")
    p.add_argument("--config")
    p.add_argument("--network")
    p.add_argument("--events")
    p.add_argument("--polygons")
    p.add_argument("--out", required=True)
    p.add_argument("--proxy", help="segment property holding the error-prone exposure proxy")
    p.add_argument("--tolerance", type=float, help="event snapping tolerance in metres (default 10)")
    p.add_argument("--snap-tolerance", type=float, help="endpoint matching tolerance in metres (default exact)")
    p.add_argument("--prune", help="keep-largest or min-size:K")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("simulate", help="simulate a dataset bundle on a grid lattice")
    p.add_argument("--config")
    p.add_argument("--variant", choices=("baseline", "classical_me", "spatial_me"))
    p.add_argument("--seed", type=int)
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model variant to a bundle")
    p.add_argument("--config")
    p.add_argument("--bundle")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--out")
    _sampler_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="tabulate DIC and WAIC across fits of one bundle")
    p.add_argument("fits", nargs="+")
    p.add_argument("--blocks", choices=("auto", "outcome", "augmented"), default="auto")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sensitivity", help="refit under a list of prior changes")
    p.add_argument("--config")
    p.add_argument("--bundle", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sweep")
    g.add_argument("--standard-design", action="store_true", help="the built-in seven-column design")
    p.add_argument("--out", required=True)
    _sampler_flags(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("export", help="write fitted rates as GeoJSON")
    p.add_argument("--fit", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail("input", str(exc), exc.code)
    except (FloatingPointError, SamplerDivergence, MapConvergenceError, NotPositiveDefiniteError,
            np.linalg.LinAlgError) as exc:
        return _fail("numerical", f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)
    except (InputError, ModelError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail("input", f"{type(exc).__name__}: {exc}", EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
