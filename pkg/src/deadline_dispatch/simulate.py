"""Discrete-event simulation of parallel FCFS multi-server clusters.

Service times are memoryless, so a job's service can be drawn when it joins
its cluster: the FCFS start time is the earliest server-free time, and the
departure time follows.  Each cluster keeps a heap of server-free times and
a heap of pending departures, which gives the joint state at every arrival.

Arrivals, services (one stream per cluster), deadlines and randomised
routing use separate generators spawned from one seed, so switching
deadline sampling off leaves the queue trajectory untouched.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bernoulli import BernoulliSplit
from .indices import REJECT, IndexPolicy
from .model import SystemConfig

MAX_IN_SYSTEM = 100_000
N_BATCHES = 20


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    config: SystemConfig
    policy: object
    horizon: int = 1_000_000
    warmup: int | None = None        # defaults to 10% of the horizon
    replications: int = 1
    seed: int = 0
    sample_deadlines: bool = True

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = self.horizon // 10
        if not (self.horizon > self.warmup >= 0):
            raise ValueError("need horizon > warmup >= 0")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if self.horizon - self.warmup < N_BATCHES:
            raise ValueError("too few post-warmup jobs for batch means")


@dataclass
class Estimate:
    mean: float
    se: float

    def within(self, value: float, k: float = 3.0) -> bool:
        return abs(self.mean - value) <= k * self.se


@dataclass
class SimResult:
    cost_per_job: Estimate
    p: Estimate
    q: Estimate
    utilization: list
    response_time: list      # mean response time per cluster
    mean_in_system: list     # time-average jobs per cluster (seen by arrivals)
    throughput: list         # admitted jobs per unit time per cluster
    jobs: int

    def rows(self, instance: str, policy: str):
        """``(instance, policy, metric, mean, se)`` tuples."""
        out = [(instance, policy, "cost_per_job", self.cost_per_job.mean, self.cost_per_job.se),
               (instance, policy, "p", self.p.mean, self.p.se),
               (instance, policy, "q", self.q.mean, self.q.se)]
        for k, (u, w) in enumerate(zip(self.utilization, self.response_time)):
            out.append((instance, policy, f"utilization_{k + 1}", u.mean, u.se))
            out.append((instance, policy, f"response_time_{k + 1}", w.mean, w.se))
        return out


def write_rows(rows, path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.writer(f)
        w.writerow(["instance", "policy", "metric", "mean", "se"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4]))])
    finally:
        if own:
            f.close()


def _decider(policy, n: int, route_rng: np.random.Generator, size: int) -> Callable[[list], int]:
    """Fast state -> action closure for the simulation loop."""
    if isinstance(policy, IndexPolicy):
        tabs = [list(map(float, v)) for v in policy.tables.values]
        lims = [float(l) for l in policy.tables.limits]
        lens = [len(t) for t in tabs]
        R = policy.reject_level

        def decide(x):
            best, arg = math.inf, REJECT
            for k in range(n):
                xk = x[k]
                v = tabs[k][xk] if xk < lens[k] else lims[k]
                if v < best:
                    best, arg = v, k
            return arg if best < R else REJECT
        return decide
    if isinstance(policy, BernoulliSplit):
        cum = np.cumsum(policy.probabilities())
        cum[-1] = 1.0
        u = iter(route_rng.random(size).tolist())
        cum_l = cum.tolist()

        def decide(x):
            r = next(u)
            for a, c in enumerate(cum_l):
                if r < c:
                    return a - 1
            return n - 1
        return decide
    if callable(policy):
        return lambda x: int(policy(tuple(x)))
    raise TypeError(f"unsupported policy: {type(policy).__name__}")


def _batch(values: np.ndarray) -> Estimate:
    b = np.array_split(values, N_BATCHES)
    means = np.array([v.mean() for v in b])
    return Estimate(float(values.mean()), float(means.std(ddof=1) / math.sqrt(N_BATCHES)))


def _pool(ests: Sequence[Estimate]) -> Estimate:
    m = float(np.mean([e.mean for e in ests]))
    se = math.sqrt(sum(e.se ** 2 for e in ests)) / len(ests)
    return Estimate(m, se)


def _replicate(sim: SimConfig, ss: np.random.SeedSequence) -> dict:
    cfg = sim.config
    n, H = cfg.n, sim.horizon
    streams = [np.random.default_rng(s) for s in ss.spawn(3 + n)]
    arr_rng, dl_rng, route_rng = streams[:3]
    svc_rngs = streams[3:]

    inter = (arr_rng.standard_exponential(H) / cfg.lam).tolist()
    svc = [(r.standard_exponential(H) / c.mu).tolist() for r, c in zip(svc_rngs, cfg.clusters)]
    if sim.sample_deadlines:
        taus = cfg.deadline.sample(dl_rng, H).tolist()
    else:
        taus = None
    decide = _decider(sim.policy, n, route_rng, H)

    free = [[0.0] * c.m for c in cfg.clusters]        # server-free times (heaps)
    pending = [[] for _ in range(n)]                   # departure times (heaps)
    used = [0] * n
    x = [0] * n
    total = 0

    action = np.empty(H, dtype=np.int64)
    missed = np.zeros(H, dtype=bool)
    resp = np.zeros(H)
    seen = np.zeros((H, n), dtype=np.int64)
    busy = np.zeros(H)
    t = 0.0
    t_warm = 0.0
    W = sim.warmup
    for i in range(H):
        t += inter[i]
        if i == W:
            t_warm = t
        for k in range(n):
            pk = pending[k]
            while pk and pk[0] <= t:
                heapq.heappop(pk)
                x[k] -= 1
                total -= 1
        seen[i] = x
        a = decide(x)
        action[i] = a
        if a == REJECT:
            continue
        fk = free[a]
        s = svc[a][used[a]]
        used[a] += 1
        start = fk[0] if fk[0] > t else t
        dep = start + s
        heapq.heapreplace(fk, dep)
        heapq.heappush(pending[a], dep)
        x[a] += 1
        total += 1
        if total > MAX_IN_SYSTEM:
            raise SimulationError(f"more than {MAX_IN_SYSTEM} jobs in system at job {i}; policy looks unstable")
        r = dep - t
        resp[i] = r
        busy[i] = s
        if taus is not None and r > taus[i]:
            missed[i] = True

    sl = slice(W, H)
    act = action[sl]
    rej = (act == REJECT).astype(float)
    miss = missed[sl].astype(float)
    R = cfg.R
    if cfg.pure_routing:
        cost = miss.copy()
    else:
        cost = R * rej + miss
    span = t - t_warm
    util, rt, L, thr = [], [], [], []
    for k, c in enumerate(cfg.clusters):
        mask = act == k
        bk = np.where(mask, busy[sl], 0.0)
        # busy time per unit time over m servers, batched by job count
        util.append(Estimate(float(bk.sum() / (c.m * span)), _batch(bk).se * len(bk) / (c.m * span)))
        rt.append(_batch(resp[sl][mask]) if mask.sum() >= N_BATCHES else Estimate(0.0, 0.0))
        L.append(float(seen[sl, k].mean()))
        thr.append(float(mask.sum() / span))
    return {"cost": _batch(cost), "p": _batch(rej), "q": _batch(miss),
            "util": util, "rt": rt, "L": L, "thr": thr}


def simulate(sim: SimConfig) -> SimResult:
    """Estimate cost per job, rejection and miss ratios with batch-means errors."""
    seeds = np.random.SeedSequence(sim.seed).spawn(sim.replications)
    reps = [_replicate(sim, s) for s in seeds]
    n = sim.config.n
    return SimResult(
        cost_per_job=_pool([r["cost"] for r in reps]),
        p=_pool([r["p"] for r in reps]),
        q=_pool([r["q"] for r in reps]),
        utilization=[_pool([r["util"][k] for r in reps]) for k in range(n)],
        response_time=[_pool([r["rt"][k] for r in reps]) for k in range(n)],
        mean_in_system=[float(np.mean([r["L"][k] for r in reps])) for k in range(n)],
        throughput=[float(np.mean([r["thr"][k] for r in reps])) for k in range(n)],
        jobs=(sim.horizon - sim.warmup) * sim.replications,
    )


def estimate_pq_tradeoff(config: SystemConfig, policy_for: Callable[[SystemConfig], object],
                         R_grid: Sequence[float], horizon: int = 200_000, seed: int = 0):
    """Simulated ``(R, p, q)`` estimates for a policy family indexed by ``R``."""
    out = []
    for j, R in enumerate(R_grid):
        cfg = config.replace(R=float(R))
        res = simulate(SimConfig(cfg, policy_for(cfg), horizon=horizon, seed=seed + j))
        out.append((float(R), res.p, res.q))
    return out
