"""Parameter sweeps comparing the heuristics with the exact optimum.

Experiments are described in an INI file, one section per experiment::

    [load]
    kind = LoadSweep
    clusters = 4:5, 8:3
    deadline = const:1
    rho_grid = 0.1, 0.5, 0.9
    R_grid = 1, 5, 20, inf
    policies = BS, IO, PI, RB
    oracle = yes
    buffer = 60

Kinds and the grid each sweeps (the other keys stay fixed):

* ``LoadSweep``: ``rho_grid`` for each ``R``
* ``RejectionCostSweep``: ``R_grid`` for each ``rho``
* ``SpeedHeterogeneity``: ``mu_grid`` (pairs ``a:b``) with fixed ``m``
* ``PoolHeterogeneity``: ``m_grid`` (pairs ``a:b``) with fixed ``mu``
* ``DeadlineMagnitude``: ``theta_grid``, deadline fixed to ``1/theta``
* ``AchievableRegion``: ``R_grid`` read as effective rejection costs
* ``PolicyStructure``: dumps the action lattice of each policy
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .bernoulli import solve_optimal_bs
from .indices import REJECT, IndexPolicy
from .mdp import DEFAULT_BUFFER, TruncatedMdp, evaluate_policy, solve_optimal
from .model import ClusterConfig, Constant, SystemConfig, format_deadline, parse_deadline

log = logging.getLogger(__name__)

HEURISTICS = ("BS", "IO", "PI", "RB")
OPTIMAL = "OPT"
COLUMNS = ["experiment", "grid_value", "rho", "R", "policy", "cost_per_job", "p", "q",
           "optimality_gap", "sim_cost_per_job", "sim_se", "error"]


class ExperimentKind(str, Enum):
    LOAD = "LoadSweep"
    REJECTION = "RejectionCostSweep"
    SPEED = "SpeedHeterogeneity"
    POOL = "PoolHeterogeneity"
    DEADLINE = "DeadlineMagnitude"
    REGION = "AchievableRegion"
    STRUCTURE = "PolicyStructure"


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _pairs(text: str) -> tuple:
    out = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if item:
            a, b = item.split(":")
            out.append((float(a), float(b)))
    return tuple(out)


def parse_clusters(text: str) -> tuple:
    """``"4:5, 8:3"`` -> clusters with ``m:mu``."""
    return tuple(ClusterConfig(int(m), mu) for m, mu in _pairs(text))


def format_clusters(clusters) -> str:
    return ", ".join(f"{c.m}:{c.mu:g}" for c in clusters)


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:g}"


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    kind: ExperimentKind
    clusters: tuple
    deadline: object = Constant(1.0)
    rho_grid: tuple = (0.9,)
    R_grid: tuple = (5.0,)
    mu_grid: tuple = ()
    m_grid: tuple = ()
    theta_grid: tuple = ()
    policies: tuple = HEURISTICS
    oracle: bool = True
    buffer: int = DEFAULT_BUFFER
    tol: float = 1e-9
    simulate: bool = False
    horizon: int = 200_000
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ExperimentKind(self.kind))
        if not self.rho_grid or not self.R_grid:
            raise ValueError(f"{self.name}: empty grid")
        if any(not (0 < r < 1) for r in self.rho_grid):
            raise ValueError(f"{self.name}: loads must lie in (0, 1)")
        need = {ExperimentKind.SPEED: self.mu_grid, ExperimentKind.POOL: self.m_grid,
                ExperimentKind.DEADLINE: self.theta_grid}.get(self.kind, (1,))
        if not need:
            raise ValueError(f"{self.name}: empty grid for {self.kind.value}")
        bad = [p for p in self.policies if p not in HEURISTICS]
        if bad:
            raise ValueError(f"{self.name}: unknown policies {bad}")

    def points(self):
        """``(grid_value, SystemConfig)`` in deterministic order."""
        cl = self.clusters
        out = []
        if self.kind is ExperimentKind.REJECTION:
            for rho in self.rho_grid:
                for R in self.R_grid:
                    out.append((_fmt(R), self._config(rho, R, cl, self.deadline)))
            return out
        for R in self.R_grid:
            if self.kind is ExperimentKind.LOAD:
                for rho in self.rho_grid:
                    out.append((_fmt(rho), self._config(rho, R, cl, self.deadline)))
            elif self.kind is ExperimentKind.SPEED:
                for mu in self.mu_grid:
                    c = tuple(ClusterConfig(k.m, v) for k, v in zip(cl, mu))
                    out.append((":".join(_fmt(v) for v in mu), self._config(self.rho_grid[0], R, c, self.deadline)))
            elif self.kind is ExperimentKind.POOL:
                for m in self.m_grid:
                    c = tuple(ClusterConfig(int(v), k.mu) for k, v in zip(cl, m))
                    out.append((":".join(_fmt(v) for v in m), self._config(self.rho_grid[0], R, c, self.deadline)))
            elif self.kind is ExperimentKind.DEADLINE:
                for th in self.theta_grid:
                    out.append((_fmt(th), self._config(self.rho_grid[0], R, cl, Constant(1.0 / th))))
            else:
                for rho in self.rho_grid:
                    out.append((_fmt(R), self._config(rho, R, cl, self.deadline)))
        return out

    @staticmethod
    def _config(rho, R, clusters, deadline) -> SystemConfig:
        cap = sum(c.m * c.mu for c in clusters)
        return SystemConfig(rho * cap, R, tuple(clusters), deadline)


def load_specs(path_or_text) -> list:
    """Parse every section of an INI experiment file."""
    cp = configparser.ConfigParser()
    p = Path(path_or_text) if not str(path_or_text).lstrip().startswith("[") else None
    if p is not None and p.exists():
        cp.read(p, encoding="utf-8")
    else:
        cp.read_string(str(path_or_text))
    specs = []
    for name in cp.sections():
        s = cp[name]
        kw = dict(name=name, kind=s.get("kind"), clusters=parse_clusters(s.get("clusters", "4:5, 8:3")))
        if "deadline" in s:
            kw["deadline"] = parse_deadline(s["deadline"])
        for key in ("rho_grid", "R_grid", "theta_grid"):
            if key in s:
                kw[key] = _floats(s[key])
        for key in ("mu_grid", "m_grid"):
            if key in s:
                kw[key] = _pairs(s[key])
        if "policies" in s:
            kw["policies"] = tuple(v.strip().upper() for v in s["policies"].split(",") if v.strip())
        if "oracle" in s:
            kw["oracle"] = s.getboolean("oracle")
        if "simulate" in s:
            kw["simulate"] = s.getboolean("simulate")
        for key, conv in (("buffer", int), ("horizon", int), ("seed", int), ("tol", float)):
            if key in s:
                kw[key] = conv(s[key])
        if "out" in s:
            kw["out"] = s["out"]
        specs.append(ExperimentSpec(**kw))
    return specs


def spec_to_ini(spec: ExperimentSpec) -> str:
    cp = configparser.ConfigParser()
    sec = {"kind": spec.kind.value, "clusters": format_clusters(spec.clusters),
           "deadline": format_deadline(spec.deadline),
           "rho_grid": ", ".join(_fmt(v) for v in spec.rho_grid),
           "R_grid": ", ".join(_fmt(v) for v in spec.R_grid),
           "policies": ", ".join(spec.policies), "oracle": str(spec.oracle).lower(),
           "buffer": str(spec.buffer), "tol": repr(spec.tol),
           "simulate": str(spec.simulate).lower(), "horizon": str(spec.horizon), "seed": str(spec.seed)}
    if spec.mu_grid:
        sec["mu_grid"] = ", ".join(f"{_fmt(a)}:{_fmt(b)}" for a, b in spec.mu_grid)
    if spec.m_grid:
        sec["m_grid"] = ", ".join(f"{_fmt(a)}:{_fmt(b)}" for a, b in spec.m_grid)
    if spec.theta_grid:
        sec["theta_grid"] = ", ".join(_fmt(v) for v in spec.theta_grid)
    if spec.out:
        sec["out"] = spec.out
    cp[spec.name] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# per-point work
# ---------------------------------------------------------------------------

def build_policies(config: SystemConfig, names) -> dict:
    """Heuristic policies by name; the BS split is shared with PI."""
    out = {}
    split = None
    if "BS" in names or "PI" in names:
        split, _ = solve_optimal_bs(config)
    for name in names:
        if name == "BS":
            out[name] = split
        else:
            out[name] = IndexPolicy.build(config, name, split=split if name == "PI" else None)
    return out


def _row(spec, label, cfg, policy, **vals):
    row = dict.fromkeys(COLUMNS, "")
    row.update(experiment=spec.name, grid_value=label, rho=repr(round(cfg.rho, 12)), R=_fmt(cfg.R), policy=policy)
    for k, v in vals.items():
        row[k] = repr(float(v)) if isinstance(v, (float, np.floating, int)) and k != "error" else v
    return row


def _run_point(args):
    spec, idx, label, cfg = args
    rows = []
    try:
        if spec.kind is ExperimentKind.REGION:
            mdp = TruncatedMdp(cfg, spec.buffer)
            sol = solve_optimal(mdp, tol=spec.tol)
            ev = evaluate_policy(mdp, sol.policy)
            rows.append(_row(spec, label, cfg, OPTIMAL, cost_per_job=sol.cost_per_job, p=ev.p, q=ev.q,
                             optimality_gap=0.0))
            return idx, rows, 0
        mdp = TruncatedMdp(cfg, spec.buffer)
        opt = None
        if spec.oracle and cfg.n <= 2:
            sol = solve_optimal(mdp, tol=spec.tol)
            ev = evaluate_policy(mdp, sol.policy)
            opt = sol.cost_per_job
            rows.append(_row(spec, label, cfg, OPTIMAL, cost_per_job=opt, p=ev.p, q=ev.q, optimality_gap=0.0))
        pols = build_policies(cfg, spec.policies)
        for j, name in enumerate(spec.policies):
            ev = evaluate_policy(mdp, pols[name])
            vals = dict(cost_per_job=ev.cost_per_job, p=ev.p, q=ev.q)
            if opt is not None:
                vals["optimality_gap"] = ev.cost_per_job - opt
            if spec.simulate:
                from .simulate import SimConfig, simulate
                res = simulate(SimConfig(cfg, pols[name], horizon=spec.horizon,
                                         seed=spec.seed + 1000 * idx + j))
                vals["sim_cost_per_job"] = res.cost_per_job.mean
                vals["sim_se"] = res.cost_per_job.se
            rows.append(_row(spec, label, cfg, name, **vals))
        return idx, rows, 0
    except Exception as exc:  # recorded per point, the sweep carries on
        log.warning("%s point %s failed: %s", spec.name, label, exc)
        tag = f"{type(exc).__name__}: {exc}"
        names = ([OPTIMAL] if spec.oracle else []) + list(spec.policies)
        return idx, [_row(spec, label, cfg, p, error=tag) for p in names or [""]], 1


@dataclass
class ExperimentResult:
    rows: list
    failures: int = 0

    def to_csv(self, path_or_file=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        text = buf.getvalue()
        if path_or_file is not None:
            if hasattr(path_or_file, "write"):
                path_or_file.write(text)
            else:
                Path(path_or_file).write_text(text, encoding="utf-8")
        return text

    def column(self, name, policy=None):
        return [r[name] for r in self.rows if policy is None or r["policy"] == policy]


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> ExperimentResult:
    """Evaluate every policy (and the optimum) at every grid point.

    Points may run in a process pool; rows are merged in grid order, so
    the table is identical whatever the worker count.
    """
    if spec.kind is ExperimentKind.STRUCTURE:
        raise ValueError("use emit_policy_structure for PolicyStructure experiments")
    jobs = [(spec, i, label, cfg) for i, (label, cfg) in enumerate(spec.points())]
    if not spec.policies and spec.kind is not ExperimentKind.REGION:
        return ExperimentResult([], 0)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_run_point, jobs))
    else:
        done = [_run_point(j) for j in jobs]
    done.sort(key=lambda t: t[0])
    rows = [r for _, rs, _ in done for r in rs]
    failures = sum(f for _, _, f in done)
    res = ExperimentResult(rows, failures)
    if spec.out:
        res.to_csv(spec.out)
    return res


def emit_policy_structure(config: SystemConfig, policies=("OPT", "PI", "RB", "IO"),
                          B: int = DEFAULT_BUFFER, path_or_file=None, tol: float = 1e-9):
    """Action per lattice state for each policy; returns ``{name: actions}``.

    Actions are ``REJECT`` (-1) or a zero-based cluster id; the CSV has
    columns ``policy, x1, x2, action`` with ``reject`` or a 1-based id.
    Index policies are tabulated from their own decisions.
    """
    if config.n != 2:
        raise ValueError("policy structure dumps need exactly two clusters")
    mdp = TruncatedMdp(config, B)
    heur = [p for p in policies if p != OPTIMAL]
    pols = build_policies(config, [p for p in heur if p != "BS"])
    out = {}
    for name in policies:
        if name == OPTIMAL:
            out[name] = np.array(solve_optimal(mdp, tol=tol).policy)
        elif name == "BS":
            raise ValueError("a Bernoulli split is randomised and has no action lattice")
        else:
            X = zip(mdp.coords[0].tolist(), mdp.coords[1].tolist())
            out[name] = np.array([pols[name].decide(x) for x in X])
    if path_or_file is not None:
        own = not hasattr(path_or_file, "write")
        f = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
        try:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["policy", "x1", "x2", "action"])
            for name, acts in out.items():
                for i in range(mdp.size):
                    a = int(acts[i])
                    w.writerow([name, int(mdp.coords[0][i]), int(mdp.coords[1][i]),
                                "reject" if a == REJECT else a + 1])
        finally:
            if own:
                f.close()
    return out


def reject_cells(actions: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(actions) == REJECT))
