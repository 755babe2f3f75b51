"""Command-line entry points: run, sweep, fit, accept.

    ddopt run    --config exp.toml --out results/
    ddopt sweep  --config exp.toml --axis gamma --grid 0.1,0.5,0.9 --out results/
    ddopt fit    --traj 'results/traj_*.csv' --mode linear --burn-in 0.1
    ddopt accept --suite all

The DDOPT_SEED_OFFSET environment variable shifts every configured seed.
"""

from __future__ import annotations

import argparse
import csv
import glob
import sys

import numpy as np

from .harness import fit_rate, load_config, run_experiment


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    paths = run_experiment(cfg, args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    cfg.sweep_axis = args.axis
    cfg.sweep_grid = [float(g) for g in args.grid.split(",")]
    cfg.validate()
    paths = run_experiment(cfg, args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_fit(args) -> int:
    files = sorted(glob.glob(args.traj))
    if not files:
        print(f"no trajectory files match {args.traj}", file=sys.stderr)
        return 2
    mode = "log-t-over-t" if args.mode == "logt" else args.mode
    by_t: dict = {}
    for path in files:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                t = int(row["t"])
                v = float(row["gap"] if mode == "log-t-over-t" else row["dist_sq"])
                by_t.setdefault(t, []).append(v)
    ts = sorted(by_t)
    vals = [float(np.nanmean(by_t[t])) for t in ts]
    fit = fit_rate(ts, vals, mode=mode, burn_in=args.burn_in)
    if not fit.ok:
        print(f"fit unavailable: {fit.diagnostic}")
        return 1
    print(
        f"mode={fit.mode} window=[{fit.t_start},{fit.t_end}] rows={fit.n_rows} "
        f"slope={fit.slope:.6g} factor={fit.factor:.6g} r2={fit.r2:.4f}"
    )
    return 0


def _cmd_accept(args) -> int:
    from .acceptance import run_suite

    results = run_suite(args.suite)
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ddopt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the experiment described by a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="run a config across a parameter grid")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=["gamma", "eps"])
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("fit", help="fit a convergence rate to trajectory CSVs")
    p.add_argument("--traj", required=True, help="glob of trajectory CSV files")
    p.add_argument("--mode", default="linear", choices=["linear", "logt", "log-t-over-t"])
    p.add_argument("--burn-in", type=float, default=0.1)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("accept", help="run a named acceptance suite end-to-end")
    p.add_argument("--suite", default="all")
    p.set_defaults(fn=_cmd_accept)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
