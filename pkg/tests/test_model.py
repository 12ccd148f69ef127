import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from deadline_dispatch.model import (
    ClusterConfig, Constant, Exponential, MissProbTable, SystemConfig, Uniform,
    erlang_survival, erlang_survival_table, format_deadline, hit_table, laplace_derivative,
    laplace_transform, miss_prob_constant, miss_prob_exponential, miss_prob_uniform,
    miss_table, parse_deadline,
)


def direct_survival(m, mu, j, t):
    """P{Poisson(m mu t) <= j-1}."""
    return stats.poisson.cdf(j - 1, m * mu * t)


def direct_constant(m, mu, x, t):
    """Pointwise closed form for a constant deadline."""
    if m == 1:
        return direct_survival(1, mu, x + 1, t)
    if x < m:
        return math.exp(-mu * t)
    j = x - m + 1
    tail = stats.poisson.sf(j - 1, (m - 1) * mu * t)   # 1 - Q_{m-1}(j)
    return direct_survival(m, mu, j, t) + math.exp(-mu * t) * tail * (m / (m - 1)) ** j


def response_miss_quad(m, mu, x, t):
    """P{A + xi > t}, A ~ Erlang(j, m mu), xi ~ Exp(mu), by quadrature."""
    if x < m:
        return math.exp(-mu * t)
    j = x - m + 1
    a = stats.gamma(j, scale=1.0 / (m * mu))
    inner, _ = integrate.quad(lambda s: a.pdf(s) * math.exp(-mu * (t - s)), 0, t, epsabs=1e-14, epsrel=1e-12)
    return a.sf(t) + inner


# -- erlang survival -------------------------------------------------------

def test_survival_at_time_zero():
    assert erlang_survival(1, 1.0, 1, 0.0) == 1.0


def test_survival_single_stage():
    assert erlang_survival(2, 0.5, 1, 1.0) == pytest.approx(math.exp(-1), abs=1e-15)


@pytest.mark.parametrize("m,mu,t", [(2, 0.5, 1.0), (1, 1.0, 2.0), (8, 3.0, 1.0), (40, 2.0, 3.0)])
def test_survival_recursion_matches_direct_sum(m, mu, t):
    J = 200
    Q = erlang_survival_table(m, mu, J, t)
    ref = direct_survival(m, mu, np.arange(1, J + 1), t)
    np.testing.assert_allclose(Q, ref, rtol=1e-12, atol=1e-300)
    assert erlang_survival(2, 0.5, 3, 1.0) == pytest.approx(direct_survival(2, 0.5, 3, 1.0), rel=1e-12)


def test_survival_monotone_and_tends_to_one():
    Q = erlang_survival_table(3, 2.0, 300, 4.0)
    assert np.all(np.diff(Q) >= 0)
    assert Q[-1] == pytest.approx(1.0, abs=1e-12)


def test_survival_underflow_is_handled():
    # exp(-m mu t) underflows here; the log-space path must still be exact
    Q = erlang_survival_table(500, 4.0, 2600, 1.0)
    ref = direct_survival(500, 4.0, np.arange(1, 2601), 1.0)
    np.testing.assert_allclose(Q, ref, rtol=1e-10, atol=1e-300)


@pytest.mark.parametrize("j,t", [(0, 1.0), (1, -0.1)])
def test_survival_domain(j, t):
    with pytest.raises(ValueError):
        erlang_survival(2, 1.0, j, t)


# -- constant deadline -----------------------------------------------------

def test_constant_below_pool_size():
    assert miss_prob_constant(ClusterConfig(4, 5.0), 2, 1.0) == pytest.approx(math.exp(-5), rel=1e-14)


def test_constant_single_job_single_server():
    assert miss_prob_constant(ClusterConfig(1, 1.0), 0, 2.0) == pytest.approx(math.exp(-2), rel=1e-14)


def test_constant_against_quadrature_and_monte_carlo():
    value = miss_prob_constant(ClusterConfig(2, 1.0), 3, 1.0)
    assert value == pytest.approx(response_miss_quad(2, 1.0, 3, 1.0), abs=1e-12)
    rng = np.random.default_rng(7)
    n = 10_000_000
    resp = rng.gamma(2, 0.5, n) + rng.exponential(1.0, n)
    mc = np.mean(resp > 1.0)
    assert float(f"{mc:.3g}") == pytest.approx(float(f"{value:.3g}"), abs=1.01e-3)


@pytest.mark.parametrize("m,mu,t", [(1, 1.0, 2.0), (2, 1.0, 1.0), (4, 5.0, 1.0), (8, 3.0, 1.0), (6, 0.5, 3.0)])
def test_constant_table_matches_pointwise_formula(m, mu, t):
    P = miss_table(ClusterConfig(m, mu), Constant(t), 200)
    ref = np.array([direct_constant(m, mu, x, t) for x in range(201)])
    np.testing.assert_allclose(P, ref, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("m,mu,x,t", [(3, 2.0, 7, 1.5), (8, 3.0, 30, 1.0), (1, 1.0, 4, 2.0)])
def test_constant_against_response_time_quadrature(m, mu, x, t):
    if m == 1:
        ref = stats.gamma(x + 1, scale=1.0 / mu).sf(t)
    else:
        ref = response_miss_quad(m, mu, x, t)
    assert miss_prob_constant(ClusterConfig(m, mu), x, t) == pytest.approx(ref, abs=1e-11)


# -- uniform deadline ------------------------------------------------------

def test_uniform_below_pool_size():
    # (e^-0.3 - e^-1.7) / 1.4
    value = miss_prob_uniform(ClusterConfig(2, 1.0), 1, 0.3, 1.7)
    assert value == pytest.approx((math.exp(-0.3) - math.exp(-1.7)) / 1.4, rel=1e-14)
    assert value == pytest.approx(0.398668, abs=5e-7)


def test_uniform_vanishing_window_misses_surely():
    for T in (1e-2, 1e-4, 1e-6):
        v = miss_prob_uniform(ClusterConfig(1, 1.0), 0, 0.0, T)
        assert 1 - v <= T


def _uniform_quad(m, mu, x, t1, t2):
    f = lambda t: direct_constant(m, mu, x, t)
    val, _ = integrate.quad(f, t1, t2, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val / (t2 - t1)


@pytest.mark.parametrize("m,mu,x,t1,t2", [(2, 1.0, 4, 0.3, 1.7), (1, 1.0, 3, 0.3, 1.7),
                                           (6, 0.5, 20, 2.5, 3.5), (4, 5.0, 12, 0.0, 2.0),
                                           (8, 3.0, 40, 0.3, 1.7)])
def test_uniform_against_quadrature(m, mu, x, t1, t2):
    v = miss_prob_uniform(ClusterConfig(m, mu), x, t1, t2)
    assert v == pytest.approx(_uniform_quad(m, mu, x, t1, t2), abs=1e-8)


def test_uniform_narrow_window_matches_constant():
    c = ClusterConfig(3, 2.0)
    for x in (0, 2, 5, 20):
        u = miss_prob_uniform(c, x, 1.0 - 1e-4, 1.0 + 1e-4)
        assert u == pytest.approx(miss_prob_constant(c, x, 1.0), abs=1e-3)


def test_uniform_domain():
    with pytest.raises(ValueError):
        Uniform(1.0, 1.0)
    with pytest.raises(ValueError):
        Uniform(-0.1, 1.0)


# -- exponential deadline --------------------------------------------------

def test_exponential_below_pool_size():
    assert miss_prob_exponential(ClusterConfig(3, 2.0), 1, 1.0) == pytest.approx(1 / 3, rel=1e-14)


def test_exponential_single_server_empty():
    assert miss_prob_exponential(ClusterConfig(1, 1.0), 0, 1.0) == pytest.approx(0.5, rel=1e-14)


@pytest.mark.parametrize("m,mu,x,theta", [(2, 1.0, 5, 1.0), (1, 1.0, 2, 1.0), (4, 5.0, 9, 0.5), (8, 3.0, 30, 2.0)])
def test_exponential_against_quadrature(m, mu, x, theta):
    f = lambda t: theta * math.exp(-theta * t) * direct_constant(m, mu, x, t)
    ref, _ = integrate.quad(f, 0, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    assert miss_prob_exponential(ClusterConfig(m, mu), x, theta) == pytest.approx(ref, abs=1e-8)


def test_exponential_single_server_closed_form():
    P = miss_table(ClusterConfig(1, 1.0), Exponential(1.0), 10)
    np.testing.assert_allclose(P, 1 - 0.5 ** (np.arange(11) + 1), rtol=1e-14)


# -- table invariants ------------------------------------------------------

CLUSTERS = [ClusterConfig(1, 1.0), ClusterConfig(2, 1.0), ClusterConfig(4, 5.0), ClusterConfig(8, 3.0), ClusterConfig(6, 0.5)]


@pytest.mark.parametrize("cluster", CLUSTERS, ids=lambda c: f"m{c.m}mu{c.mu}")
def test_table_invariants(cluster, deadline):
    P = MissProbTable.build(cluster, deadline, 500).values
    assert np.all((P >= 0) & (P <= 1))
    assert np.all(np.diff(P) >= -1e-15)
    assert np.ptp(P[: cluster.m]) < 1e-15
    assert 1 - P[-1] < 1e-3
    with pytest.raises(ValueError):
        P[0] = 0.0


@pytest.mark.parametrize("cluster", CLUSTERS, ids=lambda c: f"m{c.m}mu{c.mu}")
def test_hit_table_is_accurate_complement(cluster, deadline):
    P = miss_table(cluster, deadline, 300)
    H = hit_table(cluster, deadline, 300)
    np.testing.assert_allclose(H, 1 - P, atol=1e-14)
    assert np.all(H >= 0)


def test_hit_table_relative_accuracy_in_tail():
    # single server, constant deadline: hit probability is P{Poisson(mu t) >= x+1}
    H = hit_table(ClusterConfig(1, 1.0), Constant(2.0), 120)
    ref = stats.poisson.sf(np.arange(121), 2.0)
    np.testing.assert_allclose(H, ref, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 12), mu=st.floats(0.1, 10), t=st.floats(0.05, 5), X=st.integers(0, 120),
       family=st.sampled_from(["const", "unif", "exp"]))
def test_table_properties_random(m, mu, t, X, family):
    d = {"const": Constant(t), "unif": Uniform(0.5 * t, 1.5 * t), "exp": Exponential(1 / t)}[family]
    P = miss_table(ClusterConfig(m, mu), d, X)
    assert P.shape == (X + 1,)
    assert np.all((P >= 0) & (P <= 1))
    assert np.all(np.diff(P) >= -1e-14)
    assert np.ptp(P[: min(m, X + 1)]) <= 1e-14


# -- Laplace transform -----------------------------------------------------

def test_laplace_constant():
    assert laplace_transform(Constant(1.0), 2.0) == pytest.approx(math.exp(-2), rel=1e-15)


def test_laplace_exponential_near_zero():
    assert laplace_transform(Exponential(1.0), 1e-12) == pytest.approx(1.0, abs=1e-11)


def test_laplace_uniform_against_quadrature():
    ref, _ = integrate.quad(lambda t: math.exp(-t) / 1.4, 0.3, 1.7, epsabs=1e-14)
    v = laplace_transform(Uniform(0.3, 1.7), 1.0)
    assert v == pytest.approx(ref, abs=1e-13)
    assert v == pytest.approx(0.398668, abs=5e-7)


def test_laplace_domain():
    with pytest.raises(ValueError):
        laplace_transform(Constant(1.0), 0.0)


@pytest.mark.parametrize("s", [0.3, 1.0, 5.0])
def test_laplace_derivative_against_finite_difference(deadline, s):
    h = 1e-6
    fd = (laplace_transform(deadline, s + h) - laplace_transform(deadline, s - h)) / (2 * h)
    assert laplace_derivative(deadline, s) == pytest.approx(fd, rel=1e-7)


# -- configuration ---------------------------------------------------------

@pytest.mark.parametrize("text,expected", [("const:1", Constant(1.0)), ("unif:0.3:1.7", Uniform(0.3, 1.7)),
                                           ("exp:2", Exponential(2.0))])
def test_parse_deadline_roundtrip(text, expected):
    d = parse_deadline(text)
    assert d == expected
    assert parse_deadline(format_deadline(d)) == d


@pytest.mark.parametrize("text", ["const", "gamma:1", "unif:1", "exp:-1", "const:0"])
def test_parse_deadline_rejects(text):
    with pytest.raises(ValueError):
        parse_deadline(text)


def test_system_config_validation():
    cl = (ClusterConfig(4, 5.0), ClusterConfig(8, 3.0))
    cfg = SystemConfig.from_load(0.9, math.inf, (4, 8), (5, 3), Constant(1.0))
    assert cfg.lam == pytest.approx(0.9 * 44)
    assert cfg.pure_routing and cfg.n == 2 and cfg.capacity == 44
    with pytest.raises(ValueError):
        SystemConfig(44.0, 1.0, cl, Constant(1.0))
    with pytest.raises(ValueError):
        SystemConfig(1.0, -1.0, cl, Constant(1.0))
    with pytest.raises(ValueError):
        ClusterConfig(0, 1.0)
    with pytest.raises(ValueError):
        ClusterConfig(1, 0.0)


def test_deadline_sampling_means(rng):
    for d, mean in [(Constant(1.0), 1.0), (Uniform(0.3, 1.7), 1.0), (Exponential(2.0), 0.5)]:
        s = d.sample(rng, 200_000)
        assert s.mean() == pytest.approx(mean, rel=1e-2)
        assert d.mean == pytest.approx(mean)
