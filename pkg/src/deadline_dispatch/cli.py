"""Command-line entry point: ``python -m deadline_dispatch <command>``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from contextlib import contextmanager

from .bernoulli import solve_optimal_bs
from .experiments import (ExperimentKind, OPTIMAL, emit_policy_structure, load_specs,
                          parse_clusters, run_experiment)
from .indices import DEFAULT_XMAX, IndexKind, build_index_table
from .mdp import (DEFAULT_BUFFER, LatticePolicy, TruncatedMdp, achievable_region_sample,
                  dump_policy_csv, evaluate_policy, solve_optimal)
from .model import SystemConfig, parse_deadline
from .simulate import SimConfig, simulate, write_rows

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


@contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as f:
            yield f


def _instance(args) -> SystemConfig:
    clusters = parse_clusters(args.clusters)
    deadline = parse_deadline(args.deadline)
    R = float(args.R)
    if args.lam is not None:
        return SystemConfig(args.lam, R, clusters, deadline)
    return SystemConfig.from_load(args.rho, R, [c.m for c in clusters], [c.mu for c in clusters], deadline)


def _add_instance(p):
    p.add_argument("--clusters", default="4:5,8:3", help="comma-separated m:mu pairs")
    p.add_argument("--deadline", default="const:1", help="const:t | unif:t1:t2 | exp:theta")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rho", type=float, default=0.9, help="system load")
    g.add_argument("--lam", type=float, default=None, help="arrival rate (overrides --rho)")
    p.add_argument("-R", "--R", default="inf", help="rejection cost; inf disables admission control")


def _add_common(p, seed=False, buffer=False, tol=False):
    p.add_argument("--out", default=None, help="output file (default stdout)")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    if buffer:
        p.add_argument("--buffer", type=int, default=DEFAULT_BUFFER, help="per-queue truncation")
    if tol:
        p.add_argument("--tol", type=float, default=1e-9)


def _policy(cfg, name, mdp=None, tol=1e-9):
    name = name.upper()
    if name == "BS":
        return solve_optimal_bs(cfg)[0]
    if name in ("OPT", "OPTIMAL"):
        mdp = mdp or TruncatedMdp(cfg)
        return LatticePolicy.from_solution(mdp, solve_optimal(mdp, tol=tol))
    from .indices import IndexPolicy
    return IndexPolicy.build(cfg, name)


def cmd_indices(args):
    cfg = _instance(args)
    table = build_index_table(cfg, IndexKind(args.kind.upper()), args.xmax)
    with _output(args.out) as f:
        table.to_csv(f)
    return EXIT_OK


def cmd_bs(args):
    cfg = _instance(args)
    split, cert = solve_optimal_bs(cfg)
    with _output(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["quantity", "value"])
        w.writerow(["lambda_0", repr(float(split.lam0))])
        for k, r in enumerate(split.rates):
            w.writerow([f"lambda_{k + 1}", repr(float(r))])
        w.writerow(["alpha_star", repr(float(cert.alpha_star))])
        w.writerow(["load_case", cert.case.value])
        w.writerow(["max_kkt_residual", repr(float(cert.max_residual))])
    return EXIT_OK


def cmd_solve(args):
    cfg = _instance(args)
    mdp = TruncatedMdp(cfg, args.buffer)
    sol = solve_optimal(mdp, tol=args.tol)
    if args.policy_out:
        dump_policy_csv(mdp, sol.policy, args.policy_out)
    with _output(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["quantity", "value"])
        w.writerow(["cost_rate", repr(float(sol.v))])
        w.writerow(["cost_per_job", repr(float(sol.cost_per_job))])
        w.writerow(["sweeps", sol.iterations])
        w.writerow(["span", repr(float(sol.span))])
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _instance(args)
    mdp = TruncatedMdp(cfg, args.buffer)
    with _output(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["policy", "cost_rate", "cost_per_job", "p", "q"])
        for name in args.policy:
            ev = evaluate_policy(mdp, _policy(cfg, name, mdp, args.tol))
            w.writerow([name.upper(), repr(float(ev.g)), repr(float(ev.cost_per_job)), repr(float(ev.p)), repr(float(ev.q))])
    return EXIT_OK


def cmd_simulate(args):
    cfg = _instance(args)
    rows = []
    for j, name in enumerate(args.policy):
        pol = _policy(cfg, name, TruncatedMdp(cfg, args.buffer) if name.upper() in ("OPT", "OPTIMAL") else None)
        res = simulate(SimConfig(cfg, pol, horizon=args.horizon, replications=args.replications,
                                 seed=args.seed + j))
        rows.extend(res.rows(args.instance, name.upper()))
    with _output(args.out) as f:
        write_rows(rows, f)
    return EXIT_OK


def cmd_region(args):
    cfg = _instance(args)
    mdp = TruncatedMdp(cfg, args.buffer)
    grid = [float(v) for v in args.R_grid.split(",")]
    pts = achievable_region_sample(mdp, grid, tol=args.tol)
    with _output(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["R_eff", "p", "q"])
        for R, p, q in pts:
            w.writerow(["inf" if math.isinf(R) else repr(float(R)), repr(float(p)), repr(float(q))])
    return EXIT_OK


def cmd_experiment(args):
    failures = 0
    for spec in load_specs(args.spec):
        if args.section and spec.name not in args.section:
            continue
        if args.seed is not None:
            spec = type(spec)(**{**spec.__dict__, "seed": args.seed})
        out = args.out if args.out else spec.out
        if spec.kind is ExperimentKind.STRUCTURE:
            cfg = spec.points()[0][1]
            names = [OPTIMAL] + [p for p in spec.policies if p != "BS"]
            with _output(out) as f:
                emit_policy_structure(cfg, names, spec.buffer, f, spec.tol)
            continue
        spec = type(spec)(**{**spec.__dict__, "out": None})
        res = run_experiment(spec, workers=args.workers)
        with _output(out) as f:
            res.to_csv(f)
        failures += res.failures
    return EXIT_PARTIAL if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deadline_dispatch",
                                 description="Admission control and routing to parallel clusters with response-time deadlines.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("indices", help="dump IO, PI or RB index tables")
    _add_instance(p); _add_common(p)
    p.add_argument("--kind", default="PI", choices=["IO", "PI", "RB", "io", "pi", "rb"])
    p.add_argument("--xmax", type=int, default=DEFAULT_XMAX)
    p.set_defaults(func=cmd_indices)

    p = sub.add_parser("bs", help="optimal Bernoulli split and its optimality certificate")
    _add_instance(p); _add_common(p)
    p.set_defaults(func=cmd_bs)

    p = sub.add_parser("solve", help="exact optimum on the truncated lattice")
    _add_instance(p); _add_common(p, buffer=True, tol=True)
    p.add_argument("--policy-out", default=None, help="write the optimal action lattice here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", help="average cost of policies from their Poisson equations")
    _add_instance(p); _add_common(p, buffer=True, tol=True)
    p.add_argument("--policy", nargs="+", default=["BS", "IO", "PI", "RB"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="discrete-event simulation estimates")
    _add_instance(p); _add_common(p, seed=True, buffer=True)
    p.add_argument("--policy", nargs="+", default=["PI"])
    p.add_argument("--horizon", type=int, default=1_000_000)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--instance", default="instance")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run the sweeps of an INI experiment file")
    p.add_argument("spec")
    p.add_argument("--section", nargs="*", default=None, help="only these sections")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None, help="override the output file")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("region", help="(p, q) boundary of the achievable region")
    _add_instance(p); _add_common(p, buffer=True, tol=True)
    p.add_argument("--R-grid", dest="R_grid", default="0.05,0.1,0.2,0.5,1,2,5,10,20,50")
    p.set_defaults(func=cmd_region)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
