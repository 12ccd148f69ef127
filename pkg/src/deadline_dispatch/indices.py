"""Routing indices and the index policy built from them.

Every index here is a per-cluster table ``nu_k(0..X_max)`` plus a limit
value used for states beyond the table.  An arrival seeing joint state
``x`` is rejected when ``min_k nu_k(x_k) >= R`` and otherwise routed to the
cluster attaining the minimum (lowest cluster id on ties).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .bernoulli import BernoulliSplit, alpha_beta, solve_optimal_bs, stationary_miss_prob
from .model import ClusterConfig, Constant, DeadlineDistribution, SystemConfig, hit_table, miss_table

log = logging.getLogger(__name__)

DEFAULT_XMAX = 500
REJECT = -1


class IndexKind(str, Enum):
    IO = "IO"
    PI = "PI"
    RB = "RB"


@dataclass(frozen=True)
class IndexTable:
    kind: IndexKind
    values: tuple          # one array per cluster
    limits: tuple          # nu_k(inf)

    def __post_init__(self):
        for v in self.values:
            v.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.values)

    def value(self, k: int, x: int) -> float:
        v = self.values[k]
        return float(v[x]) if x < len(v) else float(self.limits[k])

    def to_csv(self, path_or_file) -> None:
        """Write ``cluster, x, value`` rows; ``x = inf`` carries the limit."""
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        f = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
        try:
            w = csv.writer(f)
            w.writerow(["cluster", "x", "value"])
            for k, (v, lim) in enumerate(zip(self.values, self.limits)):
                for x, val in enumerate(v):
                    w.writerow([k + 1, x, repr(float(val))])
                w.writerow([k + 1, "inf", repr(float(lim))])
        finally:
            if own:
                f.close()

    @classmethod
    def from_csv(cls, path, kind: IndexKind) -> "IndexTable":
        rows: dict = {}
        limits: dict = {}
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                k = int(row["cluster"]) - 1
                if row["x"] == "inf":
                    limits[k] = float(row["value"])
                else:
                    rows.setdefault(k, []).append((int(row["x"]), float(row["value"])))
        ks = sorted(rows)
        values = tuple(np.array([v for _, v in sorted(rows[k])]) for k in ks)
        return cls(IndexKind(kind), values, tuple(limits[k] for k in ks))


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def io_index(cluster: ClusterConfig, deadline: DeadlineDistribution, X_max: int = DEFAULT_XMAX) -> np.ndarray:
    """Conditional miss probability of an arrival joining ``x`` jobs."""
    if X_max < 0:
        raise ValueError("X_max must be >= 0")
    return miss_table(cluster, deadline, X_max)


# ---------------------------------------------------------------------------
# PI
# ---------------------------------------------------------------------------

def pi_limit(cluster: ClusterConfig, lam_star: float, deadline: DeadlineDistribution) -> float:
    """Limit of the PI index for a used queue; ``beta_k`` when saturated."""
    cap = cluster.capacity
    if lam_star >= cap:
        return alpha_beta(cluster, deadline)[1]
    rho = lam_star / cap
    pbar = stationary_miss_prob(cluster, lam_star, deadline)
    return (1.0 - rho * pbar) / (1.0 - rho)


def pi_index_raw(cluster: ClusterConfig, lam_star: float, deadline: DeadlineDistribution,
                 X_max: int = DEFAULT_XMAX, pmiss=None) -> np.ndarray:
    """Unguarded forward solution of the per-queue Poisson equations.

    ``lam* nu(x) = f* + mubar(x) (nu(x-1) - P_miss(x-1))`` with
    ``nu(0) = f*/lam*``.  Errors grow like ``rho*^{-x}``; use
    :func:`pi_index` for anything but diagnostics.
    """
    m, mu = cluster.m, cluster.mu
    P = miss_table(cluster, deadline, X_max) if pmiss is None else pmiss
    if lam_star <= 0:
        return P.copy()
    cap = cluster.capacity
    pbar = 1.0 if lam_star >= cap else stationary_miss_prob(cluster, lam_star, deadline)
    # carried in extended precision: each rounding is amplified by rho^{-x}
    lam_l, mu_l = np.longdouble(lam_star), np.longdouble(mu)
    f = lam_l * np.longdouble(pbar)
    nu = np.empty(X_max + 1, dtype=np.longdouble)
    nu[0] = f / lam_l
    for x in range(1, X_max + 1):
        nu[x] = (f + min(x, m) * mu_l * (nu[x - 1] - P[x - 1])) / lam_l
    return nu.astype(float)


def pi_index(cluster: ClusterConfig, lam_star: float, deadline: DeadlineDistribution,
             X_max: int = DEFAULT_XMAX, pmiss=None):
    """PI index table and its limit for a queue fed at ``lam_star`` by the optimal split.

    The forward recursion is exact but unstable.  Once a value exceeds the
    analytic limit, or (for ``x >= m``, where the exact index is provably
    nondecreasing) drops below its predecessor, the rest of the table is set
    to the limit.
    """
    P = miss_table(cluster, deadline, X_max) if pmiss is None else pmiss
    if lam_star <= 0:
        return P.copy(), 1.0
    m, mu = cluster.m, cluster.mu
    cap = cluster.capacity
    saturated = lam_star >= cap
    pbar = 1.0 if saturated else stationary_miss_prob(cluster, lam_star, deadline)
    limit = pi_limit(cluster, lam_star, deadline)
    lam_l, mu_l = np.longdouble(lam_star), np.longdouble(mu)
    f = lam_l * np.longdouble(pbar)
    nu = np.empty(X_max + 1, dtype=np.longdouble)
    nu[0] = f / lam_l
    clamped_at = None
    for x in range(1, X_max + 1):
        v = (f + min(x, m) * mu_l * (nu[x - 1] - P[x - 1])) / lam_l
        if not np.isfinite(v) or v > limit or (x >= m and v < nu[x - 1]):
            clamped_at = x
            nu[x:] = limit
            break
        nu[x] = v
    if clamped_at is not None:
        log.debug("PI index clamped to its limit %.6g from x=%d", limit, clamped_at)
    d = np.diff(nu)
    if np.any(d < -1e-9):
        log.warning("PI index not monotone for %s at x=%d", cluster, int(np.argmax(d < -1e-9)))
    return nu.astype(float), limit


def pi_index_series(cluster: ClusterConfig, lam_star: float, deadline: DeadlineDistribution,
                    X_max: int = DEFAULT_XMAX, pmiss=None) -> np.ndarray:
    """Backward-stable form of the interior PI index for ``x >= m-1``.

    Letting the closed-form partial sums run to infinity gives
    ``nu(x) = sum_{i>=0} rho^i P_miss(x+i) - rho Pbar/(1-rho)``.  Only
    defined for ``0 < lam_star < m mu``; entries below ``m-1`` are NaN.
    """
    m, cap = cluster.m, cluster.capacity
    if not 0 < lam_star < cap:
        raise ValueError("series form needs an interior rate")
    rho = lam_star / cap
    extra = int(math.ceil(40 / -math.log(rho))) + 1
    P = miss_table(cluster, deadline, X_max + extra) if pmiss is None else pmiss
    pbar = stationary_miss_prob(cluster, lam_star, deadline)
    # S(x) = P(x) + rho S(x+1), tail past the table ~ 1/(1-rho)
    S = np.empty(len(P) + 1)
    S[-1] = 1.0 / (1.0 - rho)
    for x in range(len(P) - 1, -1, -1):
        S[x] = P[x] + rho * S[x + 1]
    nu = S[: X_max + 1] - rho * pbar / (1.0 - rho)
    nu[: max(m - 1, 0)] = np.nan
    return nu


def pi_closed_form(cluster: ClusterConfig, lam_star: float, deadline: DeadlineDistribution,
                   nu_prev: float, X_max: int = DEFAULT_XMAX, pmiss=None) -> np.ndarray:
    """Closed-form PI index for ``x >= m`` from its value ``nu_prev`` at ``m-1``.

    Interior: ``rho^{-x}[rho^{m-1} nu(m-1) + sum_{j=m-1}^{x-1} rho^j (rho Pbar - P(j))]``;
    saturated: ``nu(m-1) + sum_{j=m-1}^{x-1} (1 - P(j))``.
    """
    m, cap = cluster.m, cluster.capacity
    P = miss_table(cluster, deadline, X_max) if pmiss is None else pmiss
    out = np.full(X_max + 1, np.nan)
    out[m - 1] = nu_prev
    if lam_star >= cap:
        out[m:] = nu_prev + np.cumsum(1.0 - P[m - 1 : X_max])
        return out
    pbar = stationary_miss_prob(cluster, lam_star, deadline)
    rho_l = np.longdouble(lam_star) / np.longdouble(cap)
    pw = rho_l ** np.arange(m - 1, X_max + 1)
    terms = pw[:-1] * (rho_l * np.longdouble(pbar) - P[m - 1 : X_max])
    out[m:] = ((pw[0] * np.longdouble(nu_prev) + np.cumsum(terms)) / pw[1:]).astype(float)
    return out


# ---------------------------------------------------------------------------
# RB
# ---------------------------------------------------------------------------

def rb_weights(cluster: ClusterConfig, lam: float, X: int) -> np.ndarray:
    """Marginal rejection measures ``w(0..X)`` of the single-queue admission problem."""
    m, mu = cluster.m, cluster.mu

    def mubar(x):
        return min(x, m) * mu

    w = np.zeros(X + 1)
    w[0] = lam * mu / (lam + mu)
    z_prev = 1.0
    for x in range(2, X + 2):
        z = 1.0 - lam * mubar(x - 1) / ((lam + mubar(x - 1)) * (lam + mubar(x)) * z_prev)
        rho_bar = lam / mubar(x - 1)
        d_mu = mubar(x) - mubar(x - 1)
        val = lam * (d_mu + w[x - 2] / rho_bar) / ((lam + mubar(x)) * z)
        if not math.isfinite(val) or val < 1e-300:
            w[x - 1:] = 0.0
            break
        w[x - 1] = val
        z_prev = z
    return w


def rb_index(cluster: ClusterConfig, lam: float, deadline: DeadlineDistribution,
             X_max: int = DEFAULT_XMAX, pmiss=None):
    """Restless-bandit index table and limit for a queue offered the full stream ``lam``.

    ``nu(x) = P_miss(0)`` below ``m``; above, ``nu(x) = nu(x-1) +
    lam dP_miss(x) / w(x-1)``.  When ``w`` underflows or an increment is
    not finite the table freezes at its last finite value.
    """
    if not lam > 0:
        raise ValueError("arrival rate must be positive")
    m = cluster.m
    P = miss_table(cluster, deadline, X_max) if pmiss is None else pmiss
    # increments from the complement keep relative precision where P ~ 1
    H = hit_table(cluster, deadline, X_max)
    dP = np.maximum(H[:-1] - H[1:], 0.0)
    w = rb_weights(cluster, lam, X_max)
    nu = np.empty(X_max + 1)
    nu[: min(m, X_max + 1)] = P[0]
    frozen = False
    for x in range(m, X_max + 1):
        if frozen:
            nu[x] = nu[x - 1]
            continue
        if dP[x - 1] == 0:
            inc = 0.0
        elif w[x - 1] > 0:
            inc = lam * dP[x - 1] / w[x - 1]
        else:
            inc = math.inf
        if not math.isfinite(inc):
            frozen = True
            nu[x] = nu[x - 1]
            continue
        nu[x] = nu[x - 1] + inc
    limit = float(nu[-1])
    if m == 1 and isinstance(deadline, Constant):
        limit = rb_limit_m1(cluster.mu, lam, deadline.t)
    return nu, limit


def rb_index_closed_form_m1(mu: float, lam: float, t: float, x: int, m: int = 1) -> float:
    """Single-server RB index for a constant deadline ``t``."""
    if m != 1:
        raise ValueError("closed form only holds for a single server")
    if x < 0:
        raise ValueError("x must be >= 0")
    rho = lam / mu
    j = np.arange(x + 1)
    logfact = np.cumsum(np.concatenate(([0.0], np.log(np.arange(1, x + 1)))))
    if math.isclose(rho, 1.0, rel_tol=1e-12):
        terms = (j + 1) * np.exp(j * math.log(mu * t) - logfact - mu * t)
        return float(terms.sum())
    a = np.exp(j * math.log(lam * t) - logfact - mu * t)
    b = np.exp(j * math.log(mu * t) - logfact - mu * t)
    return float(np.sum(rho * a - b) / (rho - 1.0))


def rb_limit_m1(mu: float, lam: float, t: float) -> float:
    """``lim_x nu_RB(x)`` for a single server with constant deadline ``t``."""
    rho = lam / mu
    if math.isclose(rho, 1.0, rel_tol=1e-12):
        return 1.0 + mu * t
    return (rho * math.exp((lam - mu) * t) - 1.0) / (rho - 1.0)


# ---------------------------------------------------------------------------
# assembled tables and the policy
# ---------------------------------------------------------------------------

def build_index_table(config: SystemConfig, kind, X_max: int = DEFAULT_XMAX,
                      split: BernoulliSplit | None = None) -> IndexTable:
    kind = IndexKind(kind)
    dl = config.deadline
    values, limits = [], []
    if kind is IndexKind.PI and split is None:
        split, _ = solve_optimal_bs(config)
    for k, c in enumerate(config.clusters):
        P = miss_table(c, dl, X_max)
        if kind is IndexKind.IO:
            v, lim = P, 1.0
        elif kind is IndexKind.PI:
            v, lim = pi_index(c, split.rates[k], dl, X_max, pmiss=P)
        else:
            v, lim = rb_index(c, config.lam, dl, X_max, pmiss=P)
        values.append(np.asarray(v, dtype=float))
        limits.append(float(lim))
    return IndexTable(kind, tuple(values), tuple(limits))


@dataclass(frozen=True)
class IndexPolicy:
    """Admit iff the smallest index is below ``R``; route to its cluster.

    ``decide`` returns ``REJECT`` (-1) or a zero-based cluster id.
    """

    tables: IndexTable
    R: float

    @classmethod
    def build(cls, config: SystemConfig, kind, X_max: int = DEFAULT_XMAX, split=None) -> "IndexPolicy":
        return cls(build_index_table(config, kind, X_max, split), config.R)

    @property
    def name(self) -> str:
        return self.tables.kind.value

    @property
    def reject_level(self) -> float:
        """Smallest index value that triggers a rejection.

        IO indices are miss probabilities, below 1 at every finite state, so
        with ``R >= 1`` IO never rejects.  Far enough out the table rounds to
        exactly 1 and a literal ``>= R`` test would reject there.
        """
        if self.tables.kind is IndexKind.IO and self.R >= 1:
            return math.inf
        return self.R

    def indices(self, x: Sequence[int]) -> np.ndarray:
        return np.array([self.tables.value(k, int(xk)) for k, xk in enumerate(x)])

    def decide(self, x: Sequence[int]) -> int:
        nu = self.indices(x)
        k = int(np.argmin(nu))  # first minimum = lowest id
        if nu[k] >= self.reject_level:
            return REJECT
        return k

    __call__ = decide


def decide(policy: IndexPolicy, x: Sequence[int]) -> int:
    return policy.decide(x)
