"""Domain types and single-queue conditional deadline-miss probabilities.

A job routed to an M/M/m FCFS queue that already holds ``x`` jobs has a
response time whose tail is a mixture of Erlang survival functions.  The
functions here evaluate ``P_miss(x) = P{T(x) > tau}`` for constant, uniform
and exponential relative deadlines ``tau``, either pointwise or as a whole
table ``P_miss(0..X)`` in linear time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

# roundoff slack before an out-of-range probability is treated as a bug
PROB_TOL = 1e-9


# ---------------------------------------------------------------------------
# deadlines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    """Deterministic deadline ``tau = t``."""

    t: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"constant deadline needs t > 0, got {self.t}")

    @property
    def mean(self) -> float:
        return self.t

    def cdf(self, t):
        return np.where(np.asarray(t) >= self.t, 1.0, 0.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.t)


@dataclass(frozen=True)
class Uniform:
    """Deadline uniform on ``[t1, t2]``."""

    t1: float
    t2: float

    def __post_init__(self):
        if not (0 <= self.t1 < self.t2):
            raise ValueError(f"uniform deadline needs 0 <= t1 < t2, got [{self.t1}, {self.t2}]")

    @property
    def mean(self) -> float:
        return 0.5 * (self.t1 + self.t2)

    def cdf(self, t):
        return np.clip((np.asarray(t, dtype=float) - self.t1) / (self.t2 - self.t1), 0.0, 1.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.t1, self.t2, size)


@dataclass(frozen=True)
class Exponential:
    """Deadline exponential with rate ``theta`` (mean ``1/theta``)."""

    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"exponential deadline needs theta > 0, got {self.theta}")

    @property
    def mean(self) -> float:
        return 1.0 / self.theta

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t > 0, -np.expm1(-self.theta * np.maximum(t, 0.0)), 0.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.exponential(1.0 / self.theta, size)


DeadlineDistribution = Union[Constant, Uniform, Exponential]


def parse_deadline(text: str) -> DeadlineDistribution:
    """Parse ``const:t``, ``unif:t1:t2`` or ``exp:theta``."""
    kind, *args = text.strip().split(":")
    vals = [float(a) for a in args]
    if kind in ("const", "constant") and len(vals) == 1:
        return Constant(*vals)
    if kind in ("unif", "uniform") and len(vals) == 2:
        return Uniform(*vals)
    if kind in ("exp", "exponential") and len(vals) == 1:
        return Exponential(*vals)
    raise ValueError(f"cannot parse deadline {text!r}")


def format_deadline(d: DeadlineDistribution) -> str:
    if isinstance(d, Constant):
        return f"const:{d.t:g}"
    if isinstance(d, Uniform):
        return f"unif:{d.t1:g}:{d.t2:g}"
    return f"exp:{d.theta:g}"


# ---------------------------------------------------------------------------
# clusters and systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterConfig:
    m: int
    mu: float

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"server count must be an integer >= 1, got {self.m}")
        if not self.mu > 0:
            raise ValueError(f"service rate must be positive, got {self.mu}")
        object.__setattr__(self, "m", int(self.m))

    @property
    def capacity(self) -> float:
        return self.m * self.mu

    def service_rate(self, x):
        """Total departure rate ``min(x, m) * mu`` with ``x`` jobs present."""
        return np.minimum(x, self.m) * self.mu


@dataclass(frozen=True)
class SystemConfig:
    """Arrival rate, rejection cost (``inf`` for pure routing), clusters, deadline.

    The deadline-miss cost is normalised to one.
    """

    lam: float
    R: float
    clusters: tuple
    deadline: DeadlineDistribution = field(default_factory=lambda: Constant(1.0))

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.lam > 0:
            raise ValueError(f"arrival rate must be positive, got {self.lam}")
        if not self.R >= 0:
            raise ValueError(f"rejection cost must be >= 0, got {self.R}")
        if not self.clusters:
            raise ValueError("need at least one cluster")
        if self.rho >= 1:
            raise ValueError(f"load rho = {self.rho:.4f} must be below 1")

    @classmethod
    def from_load(cls, rho: float, R: float, m: Sequence[int], mu: Sequence[float],
                  deadline: DeadlineDistribution = Constant(1.0)) -> "SystemConfig":
        clusters = tuple(ClusterConfig(mk, muk) for mk, muk in zip(m, mu))
        cap = sum(c.capacity for c in clusters)
        return cls(rho * cap, R, clusters, deadline)

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def capacity(self) -> float:
        return sum(c.capacity for c in self.clusters)

    @property
    def rho(self) -> float:
        return self.lam / self.capacity

    @property
    def pure_routing(self) -> bool:
        return math.isinf(self.R)

    def replace(self, **kw) -> "SystemConfig":
        d = dict(lam=self.lam, R=self.R, clusters=self.clusters, deadline=self.deadline)
        d.update(kw)
        return SystemConfig(**d)


# ---------------------------------------------------------------------------
# Erlang survival  Q_m(j; t) = P{Erlang(j, m mu) > t}
# ---------------------------------------------------------------------------

def _poisson_log_terms(a: float, J: int) -> np.ndarray:
    """log of e^{-a} a^l / l! for l = 0..J-1, built by the ratio a/l."""
    out = np.empty(J)
    if a == 0:
        out[:] = -np.inf
        out[0] = 0.0
        return out
    out[0] = -a
    if J > 1:
        steps = math.log(a) - np.log(np.arange(1, J))
        out[1:] = -a + np.cumsum(steps)
    return out


def _tail_sums(a: float, J: int):
    """Return (Q[0..J], L[0..J]) with Q[j] = P{Pois(a) < j}, L[j] = P{Pois(a) >= j}.

    Both are accumulated from positive terms so neither suffers cancellation;
    the upper tail is summed backwards from far enough out that the
    remaining mass is below double precision.
    """
    extra = int(a + 12.0 * math.sqrt(a) + 40)
    K = J + 1 + extra
    terms = np.exp(_poisson_log_terms(a, K))
    Q = np.concatenate(([0.0], np.cumsum(terms[: J])))
    rev = np.cumsum(terms[::-1])[::-1]
    L = rev[: J + 1]
    return Q, L


def erlang_survival_table(m: int, mu: float, J: int, t: float) -> np.ndarray:
    """``Q_m(1..J; t)`` via the first-order recursion on increments, O(J).

    ``Q_m(1) = e^{-m mu t}``, ``dQ(2) = m mu t Q_m(1)``,
    ``dQ(j+1) = (m mu t / j) dQ(j)``; the increments are carried in log
    space so a large ``m mu t`` cannot underflow them.
    """
    if J < 1:
        raise ValueError("need J >= 1")
    if t < 0:
        raise ValueError("need t >= 0")
    a = m * mu * t
    return np.minimum(np.cumsum(np.exp(_poisson_log_terms(a, J))), 1.0)


def erlang_survival(m: int, mu: float, j: int, t: float) -> float:
    """``P{A > t}`` for ``A ~ Erlang(j, m mu)``."""
    if j < 1 or int(j) != j:
        raise ValueError(f"stage count must be an integer >= 1, got {j}")
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    return float(erlang_survival_table(m, mu, int(j), t)[-1])


# ---------------------------------------------------------------------------
# conditional miss probabilities
# ---------------------------------------------------------------------------

def _checked(p: np.ndarray) -> np.ndarray:
    lo, hi = np.min(p), np.max(p)
    if lo < -PROB_TOL or hi > 1 + PROB_TOL or not np.all(np.isfinite(p)):
        raise FloatingPointError(f"probability out of range: [{lo}, {hi}]")
    return np.clip(p, 0.0, 1.0)


def _wait_correction(m: int, mu: float, J: int, t: float) -> np.ndarray:
    """``e^{-mu t} (1 - Q_{m-1}(j; t)) / (1 - 1/m)^j`` for j = 0..J.

    This is the probability that the queueing delay finishes by ``t`` but
    the job's own service runs past it.  The lower Erlang tail is summed
    directly and the geometric factor is applied in log space.
    """
    _, L = _tail_sums((m - 1) * mu * t, J)
    j = np.arange(J + 1)
    with np.errstate(divide="ignore"):
        logv = np.log(L) + j * math.log(m / (m - 1)) - mu * t
    return np.exp(logv)


def miss_table_constant(cluster: ClusterConfig, t: float, X: int) -> np.ndarray:
    """``P_miss(0..X)`` for a constant deadline ``t``."""
    m, mu = cluster.m, cluster.mu
    x = np.arange(X + 1)
    if m == 1:
        Q, _ = _tail_sums(mu * t, X + 1)
        return _checked(Q[x + 1])
    out = np.full(X + 1, math.exp(-mu * t))
    if X >= m:
        J = X - m + 1
        Q, _ = _tail_sums(m * mu * t, J)
        corr = _wait_correction(m, mu, J, t)
        j = np.arange(1, J + 1)
        out[m:] = Q[j] + corr[j]
    return _checked(out)


def miss_prob_constant(cluster: ClusterConfig, x: int, t: float) -> float:
    if x < 0:
        raise ValueError("queue state must be >= 0")
    if not t > 0:
        raise ValueError("deadline must be positive")
    return float(miss_table_constant(cluster, t, int(x))[-1])


def _uniform_integrals(m: int, mu: float, J: int, t1: float, t2: float):
    """Q*_m(j) and the waiting-correction integral for j = 0..J.

    ``Qs[j] = int_{t1}^{t2} Q_m(j; t) dt`` by integration by parts, and
    ``Ws[j] = int_{t1}^{t2} e^{-mu t}(1 - Q_{m-1}(j; t)) dt / (1-1/m)^j``
    written without the difference ``P*(0) - R*_{m-1}(j)`` that the
    geometric factor would amplify.
    """
    a1, a2 = m * mu * t1, m * mu * t2
    Q1, L1 = _tail_sums(a1, J + 1)
    Q2, L2 = _tail_sums(a2, J + 1)
    j = np.arange(J + 1)
    # Q(j+1; t1) - Q(j+1; t2) = L(j+1; t2) - L(j+1; t1), both small for large j
    Qs = t2 * Q2[j] - t1 * Q1[j] + j / (m * mu) * (L2[j + 1] - L1[j + 1])
    if m == 1:
        return Qs, None
    c1 = _wait_correction(m, mu, J, t1)
    c2 = _wait_correction(m, mu, J, t2)
    # Q_m(j;t1)-Q_m(j;t2) = L_m(j;t2)-L_m(j;t1), the (1+1/(m-1))^j factor cancels the outer one
    Ws = (c1 - c2 + (L2[j] - L1[j])) / mu
    return Qs, Ws


def miss_table_uniform(cluster: ClusterConfig, t1: float, t2: float, X: int) -> np.ndarray:
    """``P_miss(0..X)`` for a deadline uniform on ``[t1, t2]``."""
    if not (0 <= t1 < t2):
        raise ValueError(f"need 0 <= t1 < t2, got [{t1}, {t2}]")
    m, mu = cluster.m, cluster.mu
    width = t2 - t1
    if m == 1:
        Qs, _ = _uniform_integrals(1, mu, X + 1, t1, t2)
        return _checked(Qs[np.arange(X + 1) + 1] / width)
    p0 = (math.exp(-mu * t1) - math.exp(-mu * t2)) / mu
    out = np.full(X + 1, p0)
    if X >= m:
        J = X - m + 1
        Qs, Ws = _uniform_integrals(m, mu, J, t1, t2)
        j = np.arange(1, J + 1)
        out[m:] = Qs[j] + Ws[j]
    return _checked(out / width)


def miss_prob_uniform(cluster: ClusterConfig, x: int, t1: float, t2: float) -> float:
    if x < 0:
        raise ValueError("queue state must be >= 0")
    return float(miss_table_uniform(cluster, t1, t2, int(x))[-1])


def miss_table_exponential(cluster: ClusterConfig, theta: float, X: int) -> np.ndarray:
    """``P_miss(0..X)`` for an exponential deadline with rate ``theta``.

    Taking Laplace transforms of the constant-deadline result at ``s = theta``
    collapses to ``1 - mu/(mu+theta) * (m mu/(m mu+theta))^{x-m+1}`` for
    ``x >= m`` and ``theta/(mu+theta)`` below ``m``.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    m, mu = cluster.m, cluster.mu
    x = np.arange(X + 1)
    j = np.maximum(x - m + 1, 0)
    base = mu / (mu + theta)
    ratio = m * mu / (m * mu + theta)
    if m == 1:
        return _checked(-np.expm1((x + 1) * math.log(base)))
    return _checked(1.0 - base * np.exp(j * math.log(ratio)))


def miss_prob_exponential(cluster: ClusterConfig, x: int, theta: float) -> float:
    if x < 0:
        raise ValueError("queue state must be >= 0")
    return float(miss_table_exponential(cluster, theta, int(x))[-1])


def miss_table(cluster: ClusterConfig, deadline: DeadlineDistribution, X: int) -> np.ndarray:
    """``P_miss(0..X)`` for any supported deadline family."""
    if isinstance(deadline, Constant):
        return miss_table_constant(cluster, deadline.t, X)
    if isinstance(deadline, Uniform):
        return miss_table_uniform(cluster, deadline.t1, deadline.t2, X)
    if isinstance(deadline, Exponential):
        return miss_table_exponential(cluster, deadline.theta, X)
    raise TypeError(f"unsupported deadline {deadline!r}")


# ---------------------------------------------------------------------------
# complements 1 - P_miss(x), accurate in relative terms
# ---------------------------------------------------------------------------

def _hit_kernel(m: int, J: int, tails: np.ndarray) -> np.ndarray:
    """``sum_{l>j} tails[l] * (1 - ((m-1)/m)^{l-j})`` for j = 0..J.

    With ``tails[l]`` the Poisson(m mu t) point mass this is
    ``P{A + xi <= t}`` for ``A ~ Erlang(j, m mu)``, ``xi ~ Exp(mu)``: every
    summand is positive, so nothing cancels.
    """
    K = len(tails) - J - 1
    j = np.arange(J + 1)[:, None]
    i = np.arange(K)[None, :]
    if m == 1:
        weight = np.ones(K)
    else:
        weight = -np.expm1((np.arange(K) + 1) * math.log((m - 1) / m))
    return (tails[j + 1 + i] * weight[None, :]).sum(axis=1)


def _span(a: float) -> int:
    return int(a + 12.0 * math.sqrt(a) + 40)


def hit_table(cluster: ClusterConfig, deadline: DeadlineDistribution, X: int) -> np.ndarray:
    """``1 - P_miss(0..X)`` with relative accuracy even where it underflows slowly.

    Differences ``P_miss(x) - P_miss(x-1)`` taken from this table keep full
    relative precision, which the restless-bandit recursion needs when it
    divides them by vanishing weights.
    """
    m, mu = cluster.m, cluster.mu
    x = np.arange(X + 1)
    if isinstance(deadline, Exponential):
        th = deadline.theta
        j = np.maximum(x - m + 1, 0) if m > 1 else x + 1
        base = mu / (mu + th) if m > 1 else 1.0
        ratio = m * mu / (m * mu + th)
        return base * np.exp(j * math.log(ratio))

    J = X + 1 if m == 1 else max(X - m + 1, 0)
    if isinstance(deadline, Constant):
        a = m * mu * deadline.t
        tails = np.exp(_poisson_log_terms(a, J + 2 + _span(a)))
        h = _hit_kernel(m, J, tails)
        if m == 1:
            return h[x]
        out = np.full(X + 1, -math.expm1(-mu * deadline.t))
        out[m:] = h[1:]
        return out
    if isinstance(deadline, Uniform):
        t1, t2 = deadline.t1, deadline.t2
        c = m * mu
        K = J + 3 + _span(c * t2)
        # int_{t1}^{t2} Pois(c t; l) dt = (L(l+1; c t2) - L(l+1; c t1)) / c
        L2 = np.cumsum(np.exp(_poisson_log_terms(c * t2, K + 1))[::-1])[::-1]
        L1 = np.cumsum(np.exp(_poisson_log_terms(c * t1, K + 1))[::-1])[::-1]
        tails = np.maximum(L2[1:] - L1[1:], 0.0) / (c * (t2 - t1))
        h = _hit_kernel(m, J, tails)
        if m == 1:
            return h[x]
        p0 = (math.exp(-mu * t1) - math.exp(-mu * t2)) / (mu * (t2 - t1))
        out = np.full(X + 1, 1.0 - p0)
        out[m:] = h[1:]
        return out
    raise TypeError(f"unsupported deadline {deadline!r}")


@dataclass(frozen=True)
class MissProbTable:
    cluster: ClusterConfig
    values: np.ndarray

    @classmethod
    def build(cls, cluster: ClusterConfig, deadline: DeadlineDistribution, X: int = 500):
        v = miss_table(cluster, deadline, X)
        v.setflags(write=False)
        return cls(cluster, v)

    def __getitem__(self, x):
        return self.values[x]

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# Laplace transform of the deadline
# ---------------------------------------------------------------------------

def laplace_transform(deadline: DeadlineDistribution, s):
    """``phi(s) = E[exp(-s tau)]``; vectorised in ``s``, requires ``s > 0``."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("Laplace transform needs s > 0")
    out = _phi(deadline, s)
    return float(out) if out.ndim == 0 else out


def laplace_derivative(deadline: DeadlineDistribution, s):
    """``phi'(s) = -E[tau exp(-s tau)]``."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("Laplace transform needs s > 0")
    if isinstance(deadline, Constant):
        out = -deadline.t * np.exp(-s * deadline.t)
    elif isinstance(deadline, Exponential):
        out = -deadline.theta / (s + deadline.theta) ** 2
    else:
        t1, t2 = deadline.t1, deadline.t2
        e1, e2 = np.exp(-t1 * s), np.exp(-t2 * s)
        out = ((t2 * e2 - t1 * e1) * s - (e1 - e2)) / (s * s * (t2 - t1))
    return float(out) if out.ndim == 0 else out


def _phi(deadline: DeadlineDistribution, s: np.ndarray) -> np.ndarray:
    """Laplace transform without the domain check (``s = 0`` allowed)."""
    if isinstance(deadline, Constant):
        return np.exp(-s * deadline.t)
    if isinstance(deadline, Exponential):
        return deadline.theta / (s + deadline.theta)
    t1, t2 = deadline.t1, deadline.t2
    with np.errstate(invalid="ignore", divide="ignore"):
        # -(e^{-t2 s} - e^{-t1 s}) = e^{-t1 s} * -expm1(-(t2-t1) s)
        v = np.exp(-t1 * s) * -np.expm1(-(t2 - t1) * s) / (s * (t2 - t1))
    return np.where(s == 0, 1.0, v)


def deadline_mean(deadline: DeadlineDistribution) -> float:
    return deadline.mean
