"""Command-line experiment runner.

    snpekit simulate --config <file|preset> (--theta v,v,... | --prior-draws N) [--out DIR]
    snpekit infer    --config <file|preset> [--seed N] [--workers N] [--out DIR]
    snpekit compare  RUN_DIR [RUN_DIR ...] --out DIR [--grid N]
    snpekit eval     POSTERIOR.json (--grid lo:hi:n[,lo:hi:n] | --points FILE) [--out FILE]

Exit codes: 0 success, 2 config or input error, 3 simulator/method failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, SnpekitError
from .experiment import (
    build_featurizer,
    build_prior,
    build_simulator,
    compare_runs,
    eval_posterior_grid,
    eval_posterior_points,
    load_config,
    preset_names,
    run_experiment,
    theta_names_for,
    write_feature_table,
)
from .simulators import Trace, write_trace_csv
from .snpe import child_seed, simulate_and_featurize


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="snpekit",
        description="Likelihood-free inference experiments: simulate, infer, compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the simulator and export traces/features")
    sim.add_argument("--config", required=True,
                     help=f"config file or preset ({', '.join(preset_names())})")
    sim.add_argument("--theta", help="comma-separated parameter vector")
    sim.add_argument("--prior-draws", type=int, help="simulate N draws from the prior")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--out", default="out-simulate")

    inf = sub.add_parser("infer", help="run the configured inference method")
    inf.add_argument("--config", required=True)
    inf.add_argument("--seed", type=int, default=None)
    inf.add_argument("--workers", type=int, default=1)
    inf.add_argument("--out", default=None)

    cmp_ = sub.add_parser("compare", help="tabulate posteriors across run directories")
    cmp_.add_argument("runs", nargs="+")
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--grid", type=int, default=40)

    ev = sub.add_parser("eval", help="evaluate a stored posterior's log-density")
    ev.add_argument("posterior")
    ev.add_argument("--grid", help="lo:hi:n per axis, comma separated (max 2 axes)")
    ev.add_argument("--points", help="CSV of parameter points, one per row")
    ev.add_argument("--out", default=None)
    return parser


def _parse_theta(text):
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise ConfigError(f"--theta {text!r}: expected comma-separated numbers") from None


def cmd_simulate(args):
    doc, _ = load_config(args.config)
    if (args.theta is None) == (args.prior_draws is None):
        raise ConfigError("simulate needs exactly one of --theta or --prior-draws")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    simulator = build_simulator(doc)
    featurizer = build_featurizer(doc, simulator)
    theta_names = theta_names_for(doc)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)

    if args.theta is not None:
        theta = _parse_theta(args.theta)
        if theta.size != len(theta_names):
            raise ConfigError(
                f"--theta has {theta.size} values, simulator needs {len(theta_names)}"
            )
        raw = simulator.simulate(theta, child_seed(seed, 800, 0))
        if isinstance(raw, Trace):
            write_trace_csv(out / "trace.csv", raw)
        fv = featurizer(raw)
        names = fv.names or tuple(str(i) for i in range(fv.dim))
        write_feature_table(
            out / "features.csv",
            np.atleast_2d(theta), fv.values[None], fv.mask[None],
            np.array([float(fv.bad)]), theta_names, names,
        )
        print(f"wrote {out / 'features.csv'}")
        return 0

    prior = build_prior(doc)
    n = args.prior_draws
    rng = np.random.default_rng(child_seed(seed, 801))
    thetas = prior.sample(n, rng)
    seeds = [child_seed(seed, 802, i) for i in range(n)]
    if isinstance(simulator.simulate(thetas[0], seeds[0]), Trace):
        for i in range(min(n, 5)):
            write_trace_csv(out / f"trace_{i:03d}.csv", simulator.simulate(thetas[i], seeds[i]))
    values, masks, bads = simulate_and_featurize(
        simulator, featurizer, thetas, seeds, workers=args.workers
    )
    probe = featurizer(simulator.simulate(thetas[0], seeds[0]))
    names = probe.names or tuple(str(i) for i in range(values.shape[1]))
    write_feature_table(
        out / "features.csv", thetas, values, masks, bads, theta_names, names
    )
    print(f"wrote {out / 'features.csv'} ({n} draws, {int(bads.sum())} bad)")
    return 0


def cmd_infer(args):
    doc, _ = load_config(args.config)
    out = args.out or f"runs/{doc.get('name', 'experiment')}"
    manifest = run_experiment(doc, out, seed=args.seed, workers=args.workers)
    print(f"run complete: {out} (posterior: {manifest['artifacts'].get('posterior')})")
    return 0


def cmd_compare(args):
    out = compare_runs(args.runs, args.out, grid_points=args.grid)
    print(f"comparison tables in {out}")
    return 0


def _parse_grid(text):
    axes = []
    for part in text.split(","):
        pieces = part.split(":")
        if len(pieces) != 3:
            raise ConfigError(f"--grid axis {part!r}: expected lo:hi:n")
        lo, hi, n = float(pieces[0]), float(pieces[1]), int(pieces[2])
        if n < 2 or hi <= lo:
            raise ConfigError(f"--grid axis {part!r}: need hi > lo and n >= 2")
        axes.append((lo, hi, n))
    if len(axes) > 2:
        raise ConfigError("--grid supports at most two axes")
    return axes


def cmd_eval(args):
    if (args.grid is None) == (args.points is None):
        raise ConfigError("eval needs exactly one of --grid or --points")
    if args.grid:
        pts, logd = eval_posterior_grid(args.posterior, _parse_grid(args.grid))
    else:
        with open(args.points, newline="") as fh:
            reader = csv.reader(fh)
            rows = [row for row in reader if row]
        try:
            points = np.array([[float(v) for v in row] for row in rows])
        except ValueError:
            points = np.array([[float(v) for v in row] for row in rows[1:]])
        pts, logd = points, eval_posterior_points(args.posterior, points)

    dest = Path(args.out) if args.out else None
    lines = []
    for row, ld in zip(pts, logd):
        lines.append(",".join(repr(float(v)) for v in row) + f",{repr(float(ld))}")
    text = "\n".join(
        [",".join(f"theta{i}" for i in range(pts.shape[1])) + ",log_density"] + lines
    ) + "\n"
    if dest:
        dest.write_text(text)
        print(f"wrote {dest}")
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "infer":
            return cmd_infer(args)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "eval":
            return cmd_eval(args)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SnpekitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
