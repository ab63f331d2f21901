"""Command-line entry point ``smd-npml``.

Subcommands::

    fit-npml      --data points.csv --model model.json --out fit.json
    estimate-smd  --config est.json --out result.json
    mc-rates | mc-normality | mc-efficiency | mc-donsker | mc-sphere | fisher-check
                  --config cfg.json [--seed N] [--threads T] [--out DIR]

Monte Carlo subcommands exit with status 0 iff every assertion of the
experiment passes, 1 if some assertion fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings

import numpy as np

from .auxiliary import AuxiliaryModel, default_dimension
from .errors import SmdNpmlError
from .families import SIM_STREAM, SimulationMechanism, make_draws, make_family
from .harness import (
    SCHEMA_VERSION,
    ExperimentConfig,
    ModelSpec,
    _jsonable,
    emit_report,
    load_config,
    resolve_truth,
    run_experiment,
)
from .npml import Sample, fit_npml
from .smd import BoundaryWarning, ObjectiveContext, SmdOptions, k_schedule, minimize_smd
from .sobolev import Interval

log = logging.getLogger("smd_npml")

MC_COMMANDS = {
    "mc-rates": ("rates",),
    "mc-normality": ("normality", "misspec"),
    "mc-efficiency": ("efficiency",),
    "mc-donsker": ("donsker",),
    "mc-sphere": ("sphere",),
    "fisher-check": ("fisher-check",),
}


def read_points(path) -> tuple:
    """Sample points (first column) and optional weights (second column)."""
    pts, wts = [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or not rec[0].strip() or rec[0].lstrip().startswith("#"):
                continue
            try:
                pts.append(float(rec[0]))
                if len(rec) > 1 and rec[1].strip():
                    wts.append(float(rec[1]))
            except ValueError:
                if not pts:        # tolerate a header line
                    continue
                raise
    if wts and len(wts) != len(pts):
        raise ValueError("weights column must be complete or absent")
    return np.asarray(pts), (np.asarray(wts) if wts else None)


def _write_json(path, doc):
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_fit_npml(args) -> int:
    with open(args.model) as fh:
        md = json.load(fh)
    iv = Interval(md.get("a", 0.0), md.get("b", 1.0))
    points, weights = read_points(args.data)
    sample = Sample(points, iv, weights)
    if md.get("J") is None:
        md = dict(md, J=default_dimension(int(round(sample.n)), float(md["t"])), a=iv.a, b=iv.b)
    model = AuxiliaryModel.from_dict(dict(md, a=iv.a, b=iv.b))
    fit = fit_npml(model, sample)
    _write_json(args.out, {"model": model.to_dict(), "n": sample.n, "fit": fit.to_dict()})
    return 0 if fit.converged else 1


def cmd_estimate_smd(args) -> int:
    """Estimate theta for one data set (read from CSV or simulated from a stated truth)."""
    with open(args.config) as fh:
        raw = json.load(fh)
    if raw.get("schema") != SCHEMA_VERSION:
        raise SmdNpmlError(f"config schema must be {SCHEMA_VERSION}")
    seed = int(args.seed if args.seed is not None else raw.get("master_seed", 20261016))
    iv = Interval(*raw.get("interval", (0.0, 1.0)))
    fam = make_family(raw.get("family", "exp_tilt"), iv, raw.get("theta_box"))
    spec = ModelSpec(**raw.get("model", {}))
    rep = int(raw.get("replication", 0))
    if "data" in raw:
        points, weights = read_points(raw["data"])
        sample = Sample(points, iv, weights)
    else:
        n = int(raw["n"])
        truth_cfg = ExperimentConfig(
            "normality", family=fam.name, true_theta=raw.get("true_theta"),
            true_density=raw.get("true_density"), model=spec, n_list=(n,),
            interval=tuple(raw.get("interval", (0.0, 1.0))), theta_box=raw.get("theta_box"))
        sample = resolve_truth(truth_cfg).draw(seed, n, rep)
    n = int(round(sample.n))
    model = spec.build(n, iv)
    phat = fit_npml(model, sample)
    k = k_schedule(n, raw.get("k_mode", "n2"), spec.t, float(raw.get("k_const", 1.0)), raw.get("k"))
    ctx = ObjectiveContext(phat, model, mech=SimulationMechanism(fam),
                           draws=make_draws(seed, SIM_STREAM, k, rep), n=n,
                           chi=float(raw.get("chi", 0.0)))
    opts = SmdOptions(grid_per_axis=int(raw.get("grid_per_axis", 15)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", BoundaryWarning)
        res = minimize_smd(ctx, opts)
    cov = None if res.covariance is None else np.asarray(res.covariance).ravel().tolist()
    doc = {"theta_hat": res.theta_hat.tolist(), "covariance": cov,
           "covariance_shape": [fam.dim, fam.dim], "objective_value": res.objective_value,
           "n": n, "k": k, "diagnostics": res.diagnostics,
           "warnings": [str(w.message) for w in caught],
           "data_fit": phat.to_dict(), "config": dict(raw, master_seed=seed)}
    _write_json(args.out, doc)
    return 0


def cmd_monte_carlo(args) -> int:
    cfg = load_config(args.config)
    allowed = MC_COMMANDS[args.command]
    if cfg.experiment not in allowed:
        raise SmdNpmlError(f"{args.command} runs {' or '.join(allowed)} experiments, "
                           f"config says {cfg.experiment!r}")
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = int(args.seed)
    if args.out is not None:
        changes["output"] = args.out
    cfg = cfg.with_(**changes) if changes else cfg
    report = run_experiment(cfg, args.threads)
    paths = emit_report(report, cfg.output or ".")
    status = "PASS" if report.passed else "FAIL"
    print(f"{cfg.experiment}: {status} ({len(report.rows)} rows, {report.wall_time:.1f}s) "
          f"-> {paths['csv']}")
    for name, ok in report.summary["assertions"].items():
        print(f"  {'ok  ' if ok else 'FAIL'} {name}")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smd-npml", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-npml", help="NPML density fit to a one-column CSV sample")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="JSON with a, b, t, zeta, D and optional J, M")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fit_npml)

    p = sub.add_parser("estimate-smd", help="simulated minimum-distance estimate")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_estimate_smd)

    for name in MC_COMMANDS:
        p = sub.add_parser(name, help=f"run the {'/'.join(MC_COMMANDS[name])} experiment")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", help="report directory (default: config 'output' or .)")
        p.set_defaults(func=cmd_monte_carlo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SmdNpmlError, OSError, ValueError, KeyError) as exc:
        print(f"smd-npml: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
