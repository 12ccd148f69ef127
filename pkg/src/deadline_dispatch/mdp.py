"""Exact average-cost optimisation on a truncated joint state space.

Each queue is capped at ``B`` jobs.  A job sent to a full queue overflows:
it is lost and booked as a missed deadline (cost 1), which is what it would
almost surely be in the untruncated system, and the state does not change.
The optimiser only overflows when every queue is full; index policies
prefer a non-full queue.  Rejections are always the policy's own choice, so
a policy that never rejects has a rejection ratio of exactly 0.

Two cost accountings are supported: the action-dependent one (pay ``R``
per rejection and ``P_miss_k(x_k)`` per routed job) and the equivalent
holding-cost one (pay ``R`` per rejection and ``h_k(x_k)`` per unit time).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bernoulli import BernoulliSplit
from .indices import REJECT, IndexPolicy
from .model import ClusterConfig, DeadlineDistribution, SystemConfig, miss_table

log = logging.getLogger(__name__)

DEFAULT_BUFFER = 60
BLOCK_COST = 1.0  # charge for a job that overflows a full buffer (booked as a miss)


class CostFormulation(str, Enum):
    ACTION = "action"     # P_miss charged on routing
    HOLDING = "holding"   # h_k(x_k) charged per unit time


class ConvergenceError(RuntimeError):
    pass


def holding_cost(cluster: ClusterConfig, x, deadline: DeadlineDistribution, pmiss=None):
    """``h(0) = 0``, ``h(x) = min(x, m) mu P_miss(x-1)``; vectorised in ``x``."""
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError("queue state must be >= 0")
    X = int(np.max(x)) if x.size else 0
    P = miss_table(cluster, deadline, max(X, 1)) if pmiss is None else pmiss
    xm1 = np.maximum(x - 1, 0)
    h = np.where(x > 0, cluster.service_rate(x) * P[xm1], 0.0)
    return float(h) if h.ndim == 0 else h


def cumulative_miss(pmiss: np.ndarray) -> np.ndarray:
    """``C(0) = 0``, ``C(x+1) = C(x) + P_miss(x)``."""
    return np.concatenate(([0.0], np.cumsum(pmiss[:-1])))


@dataclass
class TruncatedMdp:
    config: SystemConfig
    B: int = DEFAULT_BUFFER
    formulation: CostFormulation = CostFormulation.HOLDING

    def __post_init__(self):
        self.formulation = CostFormulation(self.formulation)
        cfg = self.config
        if self.B < max(c.m for c in cfg.clusters):
            raise ValueError("buffer must be at least the largest server count")
        n, B = cfg.n, self.B
        self.shape = (B + 1,) * n
        self.size = (B + 1) ** n
        self.uniform_rate = cfg.lam + cfg.capacity
        self.pmiss = [miss_table(c, cfg.deadline, B) for c in cfg.clusters]
        xs = np.arange(B + 1)
        self.hold = [holding_cost(c, xs, cfg.deadline, pmiss=P) for c, P in zip(cfg.clusters, self.pmiss)]
        self.mubar = [c.service_rate(xs).astype(float) for c in cfg.clusters]
        grids = np.indices(self.shape)
        self.coords = [g.reshape(-1) for g in grids]
        self._grids = grids
        self.reject_cost = cfg.R  # inf under pure routing: rejection unavailable

    def with_formulation(self, formulation) -> "TruncatedMdp":
        return TruncatedMdp(self.config, self.B, formulation)

    # -- per-state cost pieces (arrays over the lattice) -------------------
    def _axis_values(self, k: int, table: np.ndarray) -> np.ndarray:
        idx = [None] * self.config.n
        idx[k] = slice(None)
        return table[tuple(idx)]

    def state_cost(self) -> np.ndarray:
        """Action-independent cost rate: holding costs, or zero."""
        out = np.zeros(self.shape)
        if self.formulation is CostFormulation.HOLDING:
            for k in range(self.config.n):
                out = out + self._axis_values(k, self.hold[k])
        return out

    def route_cost(self, k: int) -> np.ndarray:
        """Per-job cost of routing to ``k`` (0 under holding costs)."""
        if self.formulation is CostFormulation.HOLDING:
            return np.zeros(self.B + 1)
        return self.pmiss[k]

    def full_mask(self) -> np.ndarray:
        m = np.ones(self.shape, dtype=bool)
        for k in range(self.config.n):
            m &= self._axis_values(k, np.arange(self.B + 1) == self.B)
        return m

    def index_of(self, x: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(x), self.shape))


# ---------------------------------------------------------------------------
# relative value iteration
# ---------------------------------------------------------------------------

def _shift_down(V: np.ndarray, k: int) -> np.ndarray:
    """``V(x - e_k)``, with the x_k = 0 slice mapped to itself."""
    out = np.empty_like(V)
    src = [slice(None)] * V.ndim
    dst = [slice(None)] * V.ndim
    dst[k] = slice(1, None)
    src[k] = slice(None, -1)
    out[tuple(dst)] = V[tuple(src)]
    dst[k] = slice(0, 1)
    src[k] = slice(0, 1)
    out[tuple(dst)] = V[tuple(src)]
    return out


def _shift_up(V: np.ndarray, k: int) -> np.ndarray:
    """``V(x + e_k)``, with the x_k = B slice mapped to itself."""
    out = np.empty_like(V)
    src = [slice(None)] * V.ndim
    dst = [slice(None)] * V.ndim
    dst[k] = slice(None, -1)
    src[k] = slice(1, None)
    out[tuple(dst)] = V[tuple(src)]
    dst[k] = slice(-1, None)
    src[k] = slice(-1, None)
    out[tuple(dst)] = V[tuple(src)]
    return out


@dataclass
class OptimalSolution:
    v: float                  # optimal cost per unit time
    relative_costs: np.ndarray
    policy: np.ndarray        # action per state, REJECT or cluster id
    iterations: int
    span: float
    lam: float

    @property
    def cost_per_job(self) -> float:
        return self.v / self.lam


def _bellman(mdp: TruncatedMdp, V: np.ndarray, base, route_costs, reject_rate):
    """One application of the uniformised operator (in cost-rate units)."""
    cfg = mdp.config
    lam = cfg.lam
    T = base.copy()
    for k in range(cfg.n):
        T += mdp._axis_values(k, mdp.mubar[k]) * (_shift_down(V, k) - V)
    options = [reject_rate]
    for k in range(cfg.n):
        opt = lam * (route_costs[k] + _shift_up(V, k) - V)
        options.append(opt)
    options = np.stack(options)
    return T, options


def _action_arrays(mdp: TruncatedMdp):
    cfg = mdp.config
    lam = cfg.lam
    full = mdp.full_mask()
    reject_rate = np.full(mdp.shape, lam * mdp.reject_cost)
    route_costs = []
    for k in range(cfg.n):
        rc = mdp._axis_values(k, mdp.route_cost(k)) + np.zeros(mdp.shape)
        at_cap = mdp._axis_values(k, np.arange(mdp.B + 1) == mdp.B) & np.ones(mdp.shape, bool)
        # overflow only when everything is full; _shift_up leaves the state put
        rc = np.where(at_cap, np.where(full, BLOCK_COST, np.inf), rc)
        route_costs.append(rc)
    return reject_rate, route_costs


def solve_optimal(mdp: TruncatedMdp, tol: float = 1e-9, max_iter: int = 1_000_000,
                  V0: np.ndarray | None = None, polish: bool = True,
                  warm_sweeps: int = 200) -> OptimalSolution:
    """Relative value iteration on the uniformised chain.

    Stops when the span of ``Lambda * (V_{i+1} - V_i)`` is below ``tol``;
    its minimum and maximum bracket the optimal cost rate.  With ``polish``
    the sweeps are interleaved with exact evaluations of the current greedy
    policy (policy iteration), which reaches the same fixed point in far
    fewer sweeps under heavy load.  It also stops once an evaluated policy
    is its own greedy policy, which is exact convergence even when roundoff
    in large relative costs keeps the span above ``tol``.
    """
    cfg = mdp.config
    Lam = mdp.uniform_rate
    base = mdp.state_cost()
    reject_rate, route_costs = _action_arrays(mdp)
    V = np.zeros(mdp.shape) if V0 is None else np.array(V0, dtype=float).reshape(mdp.shape)

    def sweep(V):
        T, options = _bellman(mdp, V, base, route_costs, reject_rate)
        options_min = options.min(axis=0)
        return T + options_min, options

    span = math.inf
    it = 0
    next_polish = warm_sweeps if polish else max_iter + 1
    rounds = 0
    evaluated = None
    while it < max_iter:
        it += 1
        T, options = sweep(V)
        lo, hi = T.min(), T.max()
        g = 0.5 * (lo + hi)
        span = hi - lo
        if span < tol:
            break
        act = options.argmin(axis=0).reshape(-1) - 1
        if evaluated is not None and np.array_equal(act, evaluated[0]):
            # the evaluated policy is its own greedy policy: policy iteration
            # has converged and what is left of the span is roundoff
            g = evaluated[1]
            break
        evaluated = None
        if it >= next_polish and rounds < 50:
            # evaluate the greedy policy exactly and restart from its relative costs
            ev = evaluate_policy(mdp, act)
            evaluated = (act, ev.g)
            V = ev.relative_costs.reshape(mdp.shape).copy()
            rounds += 1
            next_polish = it + 1
            continue
        V = V + T / Lam
        V -= V.flat[0]
    else:
        raise ConvergenceError(f"value iteration did not converge: span {span:.3e} after {max_iter} sweeps")
    act = options.argmin(axis=0) - 1  # reject wins ties, then lowest cluster id
    V = V - V.flat[0]
    return OptimalSolution(float(g), V.reshape(-1), act.reshape(-1), it, float(span), cfg.lam)


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------

@dataclass
class PolicyEvaluation:
    g: float                  # average cost per unit time
    p: float                  # rejection ratio
    q: float                  # deadline-miss ratio, overflowed jobs included
    relative_costs: np.ndarray
    stationary: np.ndarray
    lam: float
    blocked: float = 0.0      # fraction lost to a full buffer

    @property
    def cost_per_job(self) -> float:
        return self.g / self.lam


def policy_matrix(mdp: TruncatedMdp, policy) -> np.ndarray:
    """Action probabilities per state: column 0 reject, column k+1 route to k.

    Accepts an :class:`IndexPolicy`, a :class:`BernoulliSplit`, an integer
    action array over the lattice, or any callable mapping a state tuple to
    an action.  Index policies ignore full queues unless every queue is
    full; any other routing to a full queue overflows.
    """
    cfg = mdp.config
    n, N, B = cfg.n, mdp.size, mdp.B
    A = np.zeros((N, n + 1))
    X = np.stack(mdp.coords, axis=1)
    if isinstance(policy, BernoulliSplit):
        A[:] = policy.probabilities()
        return A
    if isinstance(policy, IndexPolicy):
        nu = np.stack([np.array([policy.tables.value(k, x) for x in range(B + 1)])[X[:, k]]
                       for k in range(n)], axis=1)
        all_full = (X == B).all(axis=1)
        nu = np.where((X == B) & ~all_full[:, None], np.inf, nu)
        k = nu.argmin(axis=1)
        best = nu[np.arange(N), k]
        rej = best >= policy.reject_level
        A[np.arange(N), np.where(rej, 0, k + 1)] = 1.0
        return A
    if isinstance(policy, LatticePolicy) and policy.B == B and policy.n == n:
        acts = np.asarray(policy.actions)
    elif callable(policy):
        acts = np.array([policy(tuple(int(v) for v in X[i])) for i in range(N)])
    else:
        acts = np.asarray(policy).reshape(-1)
    if acts.shape != (N,):
        raise ValueError("action array does not match the lattice")
    A[np.arange(N), np.where(acts == REJECT, 0, acts + 1)] = 1.0
    return A


def _generator(mdp: TruncatedMdp, A: np.ndarray) -> sp.csr_matrix:
    cfg = mdp.config
    N = mdp.size
    rows, cols, vals = [], [], []
    idx = np.arange(N)
    strides = [int(np.prod(mdp.shape[k + 1:])) for k in range(cfg.n)]
    for k in range(cfg.n):
        xk = mdp.coords[k]
        up = (xk < mdp.B) & (A[:, k + 1] > 0)
        rows.append(idx[up]); cols.append(idx[up] + strides[k]); vals.append(cfg.lam * A[up, k + 1])
        dn = xk > 0
        rows.append(idx[dn]); cols.append(idx[dn] - strides[k]); vals.append(mdp.mubar[k][xk[dn]])
    r = np.concatenate(rows); c = np.concatenate(cols); v = np.concatenate(vals)
    Q = sp.csr_matrix((v, (r, c)), shape=(N, N))
    Q = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
    return Q.tocsc()


def _cost_vector(mdp: TruncatedMdp, A: np.ndarray) -> np.ndarray:
    cfg = mdp.config
    if cfg.pure_routing and np.any(A[:, 0] > 0):
        raise ValueError("policy rejects jobs but rejection is disabled (R = inf)")
    c = mdp.state_cost().reshape(-1) + (cfg.lam * A[:, 0] * mdp.reject_cost if not cfg.pure_routing else 0.0)
    for k in range(cfg.n):
        xk = mdp.coords[k]
        c = c + cfg.lam * A[:, k + 1] * np.where(xk == mdp.B, BLOCK_COST, mdp.route_cost(k)[xk])
    return c


def evaluate_policy(mdp: TruncatedMdp, policy) -> PolicyEvaluation:
    """Average cost and relative costs of a stationary policy from its Poisson equations.

    Solves ``Q b - g 1 = -c`` with ``b(0) = 0`` and the balance equations
    ``pi Q = 0`` directly with a sparse LU factorisation.
    """
    cfg = mdp.config
    A = policy_matrix(mdp, policy)
    Q = _generator(mdp, A)
    c = _cost_vector(mdp, A)
    N = mdp.size
    M = sp.hstack([Q[:, 1:], sp.csc_matrix(-np.ones((N, 1)))]).tocsc()
    sol = spla.spsolve(M, -c)
    g = float(sol[-1])
    b = np.concatenate(([0.0], sol[:-1]))

    Qt = Q.T.tolil()
    Qt[0, :] = np.ones(N)
    rhs = np.zeros(N); rhs[0] = 1.0
    pi = spla.spsolve(Qt.tocsc(), rhs)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()

    p = float(pi @ A[:, 0])
    q = blocked = 0.0
    for k in range(cfg.n):
        xk = mdp.coords[k]
        full = xk == mdp.B
        q += float(pi @ (A[:, k + 1] * np.where(full, 1.0, mdp.pmiss[k][xk])))
        blocked += float(pi @ (A[:, k + 1] * full))
    return PolicyEvaluation(g, p, q, b, pi, cfg.lam, blocked)


def evaluate_split_truncated(config: SystemConfig, split: BernoulliSplit, B: int = DEFAULT_BUFFER) -> dict:
    """A Bernoulli split on the truncated lattice, one birth-death chain per queue.

    Under a split the queues are independent, so this equals the joint
    evaluation exactly; jobs sent to a full queue overflow.
    """
    lam = config.lam
    missed = 0.0
    for c, lk in zip(config.clusters, split.rates):
        if lk <= 0:
            continue
        P = miss_table(c, config.deadline, B)
        mubar = c.service_rate(np.arange(1, B + 1))
        logw = np.concatenate(([0.0], np.cumsum(np.log(lk) - np.log(mubar))))
        pi = np.exp(logw - logw.max())
        pi /= pi.sum()
        missed += lk * (float(pi[:-1] @ P[:-1]) + BLOCK_COST * float(pi[-1]))
    p, q = split.lam0 / lam, missed / lam
    g = lam * q + (lam * p * config.R if p > 0 else 0.0)
    return {"g": g, "cost_per_job": g / lam, "p": p, "q": q}


# ---------------------------------------------------------------------------
# equivalence of the two cost accountings
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    v_action: float
    v_holding: float
    offset_spread: float
    ok: bool

    @property
    def gap(self) -> float:
        return abs(self.v_action - self.v_holding)


def verify_equivalence(mdp: TruncatedMdp, tol: float = 1e-7, solver_tol: float = 1e-10,
                       raise_on_mismatch: bool = True) -> EquivalenceReport:
    """Solve both accountings and check ``b = b~ - sum_k C~_k(x_k) + const``."""
    act = solve_optimal(mdp.with_formulation(CostFormulation.ACTION), tol=solver_tol)
    hold = solve_optimal(mdp.with_formulation(CostFormulation.HOLDING), tol=solver_tol)
    shift = np.zeros(mdp.shape)
    for k in range(mdp.config.n):
        shift = shift + mdp._axis_values(k, cumulative_miss(mdp.pmiss[k]))
    diff = act.relative_costs - (hold.relative_costs - shift.reshape(-1))
    spread = float(diff.max() - diff.min())
    scale = max(abs(hold.v), 1e-12)
    ok = abs(act.v - hold.v) <= tol * scale and spread <= tol * max(1.0, np.abs(hold.relative_costs).max())
    if raise_on_mismatch and not ok:
        raise AssertionError(f"cost accountings disagree: {act.v} vs {hold.v}, spread {spread:.3e}")
    return EquivalenceReport(act.v, hold.v, spread, ok)


# ---------------------------------------------------------------------------
# trade-off curve and policy dumps
# ---------------------------------------------------------------------------

def achievable_region_sample(mdp: TruncatedMdp, weights: Sequence[float], tol: float = 1e-9):
    """``(R_eff, p, q)`` on the lower boundary of the achievable region.

    Each point solves the weighted problem with rejection cost ``R_eff``.
    """
    out = []
    for R in weights:
        sub = TruncatedMdp(mdp.config.replace(R=float(R)), mdp.B, mdp.formulation)
        sol = solve_optimal(sub, tol=tol)
        ev = evaluate_policy(sub, sol.policy)
        out.append((float(R), ev.p, ev.q))
    return out


def dump_policy_csv(mdp: TruncatedMdp, actions: np.ndarray, path_or_file) -> None:
    """``x_1, ..., x_n, action`` rows; action is ``reject`` or a 1-based cluster id."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.writer(f)
        w.writerow([f"x{k + 1}" for k in range(mdp.config.n)] + ["action"])
        for i in range(mdp.size):
            a = int(actions[i])
            w.writerow([int(c[i]) for c in mdp.coords] + ["reject" if a == REJECT else a + 1])
    finally:
        if own:
            f.close()


def deterministic_actions(mdp: TruncatedMdp, policy) -> np.ndarray:
    """Collapse a deterministic policy to one action per lattice state."""
    A = policy_matrix(mdp, policy)
    return np.where(A[:, 0] > 0.5, REJECT, A[:, 1:].argmax(axis=1))


@dataclass(frozen=True)
class LatticePolicy:
    """A deterministic policy tabulated on ``{0..B}^n``.

    States beyond the lattice are clamped to it, so the policy can drive an
    untruncated simulation.
    """

    actions: np.ndarray
    B: int
    n: int

    @classmethod
    def from_solution(cls, mdp: TruncatedMdp, sol: OptimalSolution) -> "LatticePolicy":
        return cls(np.asarray(sol.policy).copy(), mdp.B, mdp.config.n)

    def __post_init__(self):
        self.actions.setflags(write=False)

    def decide(self, x: Sequence[int]) -> int:
        idx = 0
        for xk in x:
            idx = idx * (self.B + 1) + min(int(xk), self.B)
        return int(self.actions[idx])

    __call__ = decide

    def reject_cells(self) -> int:
        return int(np.count_nonzero(self.actions == REJECT))
