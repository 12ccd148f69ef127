"""Optimal static Bernoulli splitting of the arrival stream.

Under a Bernoulli split each cluster sees an independent Poisson stream of
rate ``lam_k`` and behaves as an M/M/m queue.  The per-queue miss rate
``f_k(lam_k) = lam_k * Pbar_k(lam_k)`` is convex, so the best split solves a
separable convex program whose KKT system is solved by ranking the
one-sided marginal costs and bisecting on the multiplier.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .model import (
    ClusterConfig,
    Constant,
    DeadlineDistribution,
    Exponential,
    SystemConfig,
    _phi,
)

KKT_TOL = 1e-8

# Gauss-Legendre rule for averaging constant-deadline kernels over a uniform deadline
_GL_X, _GL_W = np.polynomial.legendre.leggauss(128)


# ---------------------------------------------------------------------------
# Erlang B / C with derivatives
# ---------------------------------------------------------------------------

def _erlang_bc(m: int, r):
    """Erlang-B, Erlang-C and their r-derivatives, vectorised in r.

    Uses the stable recurrence ``B_k = r B_{k-1} / (k + r B_{k-1})``;
    valid on ``0 <= r <= m`` (Erlang-C is 1 at ``r = m``).
    """
    r = np.asarray(r, dtype=float)
    B = np.ones_like(r)
    dB = np.zeros_like(r)
    for k in range(1, m + 1):
        N = r * B
        dN = B + r * dB
        D = k + N
        B, dB = N / D, k * dN / (D * D)
    rho = r / m
    den = 1.0 - rho + rho * B
    dden = -1.0 / m + B / m + rho * dB
    C = B / den
    dC = (dB * den - B * dden) / (den * den)
    return B, C, dB, dC


def erlang_c(m: int, r: float) -> float:
    """Probability of waiting in an M/M/m queue with offered load ``r``."""
    if m < 1:
        raise ValueError("need m >= 1")
    if not (0 <= r < m):
        raise ValueError(f"offered load must lie in [0, m) = [0, {m}), got {r}")
    return float(_erlang_bc(m, r)[1])


# ---------------------------------------------------------------------------
# divided differences of the deadline transform
# ---------------------------------------------------------------------------

def _const_kernel(t, u):
    """k(u) = expm1(-u t)/u and dk/du, with a series near u t = 0; broadcasts."""
    u, t = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(t, dtype=float))
    y = u * t
    small = np.abs(y) < 0.5
    ys = np.where(small, y, 0.0)
    # k/t = sum_{n>=1} (-1)^n y^{n-1}/n!,  k'/t^2 = sum_{j>=0} (-1)^j (j+1) y^j/(j+2)!
    k_ser = np.zeros_like(y)
    dk_ser = np.zeros_like(y)
    for n in range(24, -1, -1):
        k_ser = k_ser * ys + (-1) ** (n + 1) / math.factorial(n + 1)
        dk_ser = dk_ser * ys + (-1) ** n * (n + 1) / math.factorial(n + 2)
    uu = np.where(small, 1.0, u)
    em = np.expm1(-y)
    k = np.where(small, t * k_ser, em / uu)
    dk = np.where(small, t * t * dk_ser, (-y * np.exp(-y) - em) / (uu * uu))
    return k, dk


def _divided_difference(deadline: DeadlineDistribution, mu: float, u):
    """``D(u) = (phi(mu+u) - phi(mu))/u`` and ``D'(u)``; ``D(0) = phi'(mu)``."""
    u = np.asarray(u, dtype=float)
    if isinstance(deadline, Constant):
        t = deadline.t
        k, dk = _const_kernel(t, u)
        e = math.exp(-mu * t)
        return e * k, e * dk
    if isinstance(deadline, Exponential):
        th = deadline.theta
        a = mu + th
        b = mu + u + th
        return -th / (a * b), th / (a * b * b)
    # uniform: average the constant-deadline kernel over the deadline window
    t1, t2 = deadline.t1, deadline.t2
    ts = 0.5 * (t2 - t1) * _GL_X + 0.5 * (t1 + t2)
    ws = 0.5 * _GL_W * np.exp(-mu * ts)
    k, dk = _const_kernel(ts, u[..., None])
    return k @ ws, dk @ ws


# ---------------------------------------------------------------------------
# stationary miss probability and marginal miss rate
# ---------------------------------------------------------------------------

def _pbar_and_slope(cluster: ClusterConfig, lam, deadline: DeadlineDistribution):
    """Stationary miss probability and its lam-derivative, vectorised.

    With ``u = (m-1) mu - lam`` the sojourn-time formula reads
    ``Pbar = phi(mu) - mu * C(r) * (phi(mu+u) - phi(mu))/u``; the divided
    difference tends to ``phi'(mu)`` at ``u = 0`` so both branches of the
    closed form are one smooth expression.
    """
    m, mu = cluster.m, cluster.mu
    lam = np.asarray(lam, dtype=float)
    r = lam / mu
    _, C, _, dC = _erlang_bc(m, r)
    u = (m - 1) * mu - lam
    D, dD = _divided_difference(deadline, mu, u)
    phi_mu = float(_phi(deadline, np.asarray(mu)))
    p = phi_mu - mu * C * D
    # d/dlam: dr/dlam = 1/mu, du/dlam = -1
    dp = -dC * D + mu * C * dD
    return p, dp


def _check_rate(cluster: ClusterConfig, lam):
    lam_arr = np.asarray(lam, dtype=float)
    cap = cluster.capacity
    if np.any(lam_arr < 0) or np.any(lam_arr > cap * (1 + 1e-12)):
        raise ValueError(f"rate must lie in [0, {cap}]")
    return np.minimum(lam_arr, cap)


def stationary_miss_prob(cluster: ClusterConfig, lam, deadline: DeadlineDistribution):
    """Steady-state probability that a job sent to an M/M/m queue fed at rate ``lam`` misses."""
    lam_arr = _check_rate(cluster, lam)
    p, _ = _pbar_and_slope(cluster, lam_arr, deadline)
    p = np.where(lam_arr >= cluster.capacity, 1.0, np.clip(p, 0.0, 1.0))
    return float(p) if p.ndim == 0 else p


def miss_rate(cluster: ClusterConfig, lam, deadline: DeadlineDistribution):
    """``f(lam) = lam * Pbar(lam)``, with ``f(m mu) = m mu``."""
    lam_arr = _check_rate(cluster, lam)
    f = lam_arr * stationary_miss_prob(cluster, lam_arr, deadline)
    return float(f) if np.ndim(f) == 0 else f


def miss_rate_derivative(cluster: ClusterConfig, lam, deadline: DeadlineDistribution):
    """``f'(lam) = Pbar + lam * dPbar/dlam``; one-sided at 0 and at ``m mu``."""
    lam_arr = _check_rate(cluster, lam)
    p, dp = _pbar_and_slope(cluster, lam_arr, deadline)
    p = np.where(lam_arr >= cluster.capacity, 1.0, p)
    d = p + lam_arr * dp
    return float(d) if d.ndim == 0 else d


def alpha_beta(cluster: ClusterConfig, deadline: DeadlineDistribution):
    """One-sided marginal costs ``(f'(0+), f'(m mu-))``."""
    a = float(miss_rate_derivative(cluster, 0.0, deadline))
    b = float(miss_rate_derivative(cluster, cluster.capacity, deadline))
    return a, b


def check_condition_c(cluster: ClusterConfig, deadline: DeadlineDistribution, points: int = 1000) -> bool:
    """Numerically confirm that the marginal miss rate increases on ``(0, m mu)``."""
    grid = np.linspace(0, cluster.capacity, points + 2)[1:-1]
    d = np.diff(miss_rate_derivative(cluster, grid, deadline))
    ok = bool(np.all(d > -1e-12))
    if not ok:
        warnings.warn(f"marginal miss rate not increasing for {cluster} with {deadline}")
    return ok


def inverse_marginal(cluster: ClusterConfig, alpha: float, deadline: DeadlineDistribution,
                     tol: float = 1e-13, ab=None) -> float:
    """Rate ``lam`` in ``[0, m mu]`` with ``f'(lam) = alpha``, clamped outside ``[alpha_k, beta_k]``."""
    a, b = ab if ab is not None else alpha_beta(cluster, deadline)
    cap = cluster.capacity
    if alpha <= a:
        return 0.0
    if alpha >= b:
        return cap
    lo, hi = 0.0, cap
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if miss_rate_derivative(cluster, mid, deadline) < alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * cap:
            break
    else:
        raise RuntimeError("bisection for the inverse marginal did not converge")
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# optimal split
# ---------------------------------------------------------------------------

class LoadCase(str, Enum):
    LIGHT = "light"
    MEDIUM = "medium"
    HEAVY = "heavy"


class QueueStatus(str, Enum):
    ZERO = "zero"
    INTERIOR = "interior"
    SATURATED = "saturated"


@dataclass(frozen=True)
class BernoulliSplit:
    """Rejection rate ``lam0`` and routed rates ``rates[k]``."""

    lam0: float
    rates: tuple

    @property
    def total(self) -> float:
        return self.lam0 + sum(self.rates)

    def probabilities(self) -> np.ndarray:
        """``(p_reject, p_1, ..., p_n)``."""
        v = np.array((self.lam0,) + tuple(self.rates))
        return v / v.sum()


@dataclass(frozen=True)
class KktCertificate:
    alpha_star: float
    case: LoadCase
    status: tuple
    alphas: tuple
    betas: tuple
    residuals: dict = field(default_factory=dict)

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)

    def holds(self, tol: float = KKT_TOL) -> bool:
        return self.max_residual <= tol


def bs_objective(config: SystemConfig, split: BernoulliSplit) -> float:
    """Cost rate ``R lam0 + sum_k f_k(lam_k)`` of a split."""
    total = split.lam0 * config.R if split.lam0 > 0 else 0.0
    for c, lk in zip(config.clusters, split.rates):
        total += miss_rate(c, lk, config.deadline)
    return float(total)


def kkt_certificate(config: SystemConfig, split: BernoulliSplit, alpha_star: float,
                    case: LoadCase, tol: float = 1e-12) -> KktCertificate:
    """Residuals of the four first-order conditions at ``split``."""
    dl = config.deadline
    ab = [alpha_beta(c, dl) for c in config.clusters]
    status, res = [], {}
    lam = config.lam
    res["multiplier_le_R"] = max(0.0, alpha_star - config.R) if not math.isinf(config.R) else 0.0
    if split.lam0 > tol * lam:
        res["multiplier_eq_R"] = abs(config.R - alpha_star)
    for k, (c, lk) in enumerate(zip(config.clusters, split.rates)):
        a, b = ab[k]
        if lk <= tol * c.capacity:
            status.append(QueueStatus.ZERO)
            res[f"zero_{k}"] = max(0.0, alpha_star - a)
        elif lk >= c.capacity * (1 - tol):
            status.append(QueueStatus.SATURATED)
            res[f"saturated_{k}"] = max(0.0, b - alpha_star)
        else:
            status.append(QueueStatus.INTERIOR)
            res[f"interior_{k}"] = abs(float(miss_rate_derivative(c, lk, dl)) - alpha_star)
    res["balance"] = abs(split.total - lam) / lam
    return KktCertificate(alpha_star, case, tuple(status), tuple(a for a, _ in ab),
                          tuple(b for _, b in ab), res)


def solve_optimal_bs(config: SystemConfig, tol: float = 1e-15):
    """Optimal Bernoulli split and its KKT certificate.

    The routed volume ``S(alpha) = sum_k Lambda_k(alpha)`` is continuous and
    nondecreasing in the multiplier.  Evaluating it at the sorted
    breakpoints ``alpha_k`` and ``beta_k`` locates the load case; the
    multiplier solving ``S = lam`` is then bisected inside that bracket and
    capped at ``R``.
    """
    dl = config.deadline
    clusters = config.clusters
    lam = config.lam
    ab = [alpha_beta(c, dl) for c in clusters]
    for c in clusters:
        check_condition_c(c, dl, points=200)

    def routed(alpha):
        return sum(inverse_marginal(c, alpha, dl, ab=abk) for c, abk in zip(clusters, ab))

    alphas = sorted(a for a, _ in ab)
    betas = sorted(b for _, b in ab)
    if lam > sum(c.capacity for c in clusters):
        raise ValueError("insufficient capacity")

    # bracket the root of routed(alpha) = lam among the breakpoints
    points = sorted(set(alphas) | set(betas))
    vals = [routed(p) for p in points]
    lo = hi = None
    for i, (p, v) in enumerate(zip(points, vals)):
        if v >= lam:
            hi = p
            lo = points[i - 1] if i > 0 else p
            break
    if hi is None:
        raise ValueError("routed volume never reaches the arrival rate")

    if lo == hi:
        alpha_t = hi
    else:
        for _ in range(300):
            mid = 0.5 * (lo + hi)
            if routed(mid) < lam:
                lo = mid
            else:
                hi = mid
            if hi - lo <= tol * max(1.0, abs(hi)):
                break
        alpha_t = 0.5 * (lo + hi)

    if lam <= routed(alphas[-1]) and len(clusters) > 1:
        case = LoadCase.LIGHT
    elif lam < routed(betas[0]):
        case = LoadCase.MEDIUM
    else:
        case = LoadCase.HEAVY

    alpha_star = min(alpha_t, config.R)
    rates = tuple(inverse_marginal(c, alpha_star, dl, ab=abk) for c, abk in zip(clusters, ab))
    if alpha_t <= config.R:
        # all traffic routed; absorb bisection roundoff into the interior queues
        gap = lam - sum(rates)
        interior = [k for k, (c, r) in enumerate(zip(clusters, rates)) if 0 < r < c.capacity]
        if interior and abs(gap) < 1e-9 * lam:
            k = max(interior, key=lambda i: clusters[i].capacity - rates[i])
            rates = tuple(r + gap if i == k else r for i, r in enumerate(rates))
        lam0 = 0.0
    else:
        lam0 = max(0.0, lam - sum(rates))
    split = BernoulliSplit(lam0, rates)
    return split, kkt_certificate(config, split, alpha_star, case)


def evaluate_split(config: SystemConfig, split: BernoulliSplit) -> dict:
    """Exact infinite-buffer performance of a split, one M/M/m queue per cluster."""
    lam = config.lam
    misses = sum(miss_rate(c, lk, config.deadline) for c, lk in zip(config.clusters, split.rates))
    p = split.lam0 / lam
    q = misses / lam
    g = bs_objective(config, split)
    return {"g": g, "cost_per_job": g / lam, "p": p, "q": q}
