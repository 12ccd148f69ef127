import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deadline_dispatch.bernoulli import (
    BernoulliSplit, LoadCase, QueueStatus, alpha_beta, bs_objective, check_condition_c, erlang_c,
    evaluate_split, inverse_marginal, kkt_certificate, miss_rate, miss_rate_derivative,
    solve_optimal_bs, stationary_miss_prob,
)
from deadline_dispatch.model import ClusterConfig, Constant, Exponential, SystemConfig, Uniform, laplace_transform

from conftest import DEADLINES, base_config
from oracles import erlang_c_direct, grid_search_bs, pasta_miss


# -- Erlang C --------------------------------------------------------------

def test_erlang_c_examples():
    assert erlang_c(1, 0.5) == pytest.approx(0.5, rel=1e-15)
    assert erlang_c(2, 1.0) == pytest.approx(1 / 3, rel=1e-15)
    assert erlang_c(4, 1e-12) == pytest.approx(0.0, abs=1e-40)


@pytest.mark.parametrize("m,r", [(3, 2.2), (8, 7.1), (20, 12.0), (50, 49.5)])
def test_erlang_c_direct_formula(m, r):
    assert erlang_c(m, r) == pytest.approx(erlang_c_direct(m, r), rel=1e-12)


@pytest.mark.parametrize("r", [-0.1, 4.0, 5.0])
def test_erlang_c_domain(r):
    with pytest.raises(ValueError):
        erlang_c(4, r)


# -- stationary miss probability -------------------------------------------

def test_single_server_constant_closed_form():
    c = ClusterConfig(1, 2.0)
    assert stationary_miss_prob(c, 1.0, Constant(1.0)) == pytest.approx(math.exp(-1), rel=1e-13)


def test_empty_load_gives_laplace_transform(deadline):
    c = ClusterConfig(3, 2.0)
    assert stationary_miss_prob(c, 0.0, deadline) == pytest.approx(laplace_transform(deadline, 2.0), rel=1e-13)


def test_full_load_misses_surely(deadline):
    c = ClusterConfig(4, 5.0)
    assert stationary_miss_prob(c, 20.0, deadline) == 1.0


CASES = [(ClusterConfig(2, 1.0), 1.5), (ClusterConfig(4, 5.0), 18.0), (ClusterConfig(8, 3.0), 21.0),
         (ClusterConfig(8, 3.0), 21.0 + 1e-11), (ClusterConfig(1, 1.0), 0.7), (ClusterConfig(6, 0.5), 2.1),
         (ClusterConfig(4, 5.0), 19.9)]


@pytest.mark.parametrize("cluster,lam", CASES)
def test_stationary_against_pasta_sum(cluster, lam, deadline):
    # arrivals see the M/M/m stationary law, so average the conditional miss probability
    v = stationary_miss_prob(cluster, lam, deadline)
    assert v == pytest.approx(pasta_miss(cluster, lam, deadline, X=6000), abs=1e-10)


def test_stationary_m2_exponential_example():
    v = stationary_miss_prob(ClusterConfig(2, 1.0), 1.5, Exponential(1.0))
    assert v == pytest.approx(pasta_miss(ClusterConfig(2, 1.0), 1.5, Exponential(1.0)), abs=1e-12)


def test_stationary_continuous_across_boundary(deadline):
    # lam = (m - 1) mu is where the textbook form has a removable 0/0
    c = ClusterConfig(3, 2.0)
    lam0 = 4.0
    for eps in (1e-3, 1e-6, 1e-9, 1e-12):
        lo = stationary_miss_prob(c, lam0 - eps, deadline)
        hi = stationary_miss_prob(c, lam0 + eps, deadline)
        mid = stationary_miss_prob(c, lam0, deadline)
        assert abs(lo - mid) < 10 * eps and abs(hi - mid) < 10 * eps


@pytest.mark.parametrize("lam", [-0.1, 20.5])
def test_stationary_domain(lam):
    with pytest.raises(ValueError):
        stationary_miss_prob(ClusterConfig(4, 5.0), lam, Constant(1.0))


# -- marginal miss rate ----------------------------------------------------

def test_derivative_at_zero_is_alpha(deadline):
    c = ClusterConfig(4, 5.0)
    a, b = alpha_beta(c, deadline)
    assert miss_rate_derivative(c, 0.0, deadline) == pytest.approx(laplace_transform(deadline, 5.0), rel=1e-12)
    assert 0 < a < 1 < b


def test_derivative_single_server_closed_form():
    assert miss_rate_derivative(ClusterConfig(1, 2.0), 1.0, Constant(1.0)) == pytest.approx(2 * math.exp(-1), rel=1e-12)


@pytest.mark.parametrize("cluster,lam", [(ClusterConfig(2, 1.0), 0.6), (ClusterConfig(2, 1.0), 1.0),
                                         (ClusterConfig(2, 1.0), 1.7), (ClusterConfig(4, 5.0), 15.0),
                                         (ClusterConfig(8, 3.0), 21.0), (ClusterConfig(6, 0.5), 2.5)])
def test_derivative_against_central_difference(cluster, lam, deadline):
    h = 1e-6
    fd = (miss_rate(cluster, lam + h, deadline) - miss_rate(cluster, lam - h, deadline)) / (2 * h)
    assert miss_rate_derivative(cluster, lam, deadline) == pytest.approx(fd, abs=1e-5)


def test_beta_is_left_limit(deadline):
    c = ClusterConfig(3, 2.0)
    _, b = alpha_beta(c, deadline)
    near = miss_rate_derivative(c, 6.0 * (1 - 1e-9), deadline)
    assert near == pytest.approx(b, rel=1e-6)


def test_condition_c_holds(deadline):
    for c in (ClusterConfig(1, 1.0), ClusterConfig(4, 5.0), ClusterConfig(8, 3.0), ClusterConfig(6, 0.5)):
        assert check_condition_c(c, deadline)
        lam = np.linspace(0, c.capacity, 1000)[1:-1]
        assert np.all(np.diff(miss_rate_derivative(c, lam, deadline)) >= -1e-12)


# -- inverse marginal ------------------------------------------------------

def test_inverse_marginal_endpoints(deadline):
    c = ClusterConfig(4, 5.0)
    a, b = alpha_beta(c, deadline)
    assert inverse_marginal(c, a, deadline) == 0.0
    assert inverse_marginal(c, b, deadline) == c.capacity
    assert inverse_marginal(c, a - 0.1, deadline) == 0.0
    assert inverse_marginal(c, b + 1.0, deadline) == c.capacity


@pytest.mark.parametrize("frac", [0.01, 0.3, 0.5, 0.9, 0.999])
def test_inverse_marginal_interior(frac, deadline):
    c = ClusterConfig(8, 3.0)
    a, b = alpha_beta(c, deadline)
    alpha = a + frac * (b - a)
    lam = inverse_marginal(c, alpha, deadline)
    assert 0 < lam < c.capacity
    assert abs(miss_rate_derivative(c, lam, deadline) - alpha) < 1e-9 * max(1.0, alpha)


# -- objective -------------------------------------------------------------

def test_objective_all_rejected():
    cfg = base_config(R=5.0)
    assert bs_objective(cfg, BernoulliSplit(cfg.lam, (0.0, 0.0))) == pytest.approx(5.0 * cfg.lam)


def test_objective_saturated_queue():
    cfg = base_config(rho=0.5, R=5.0)
    split = BernoulliSplit(cfg.lam - 20.0, (20.0, 0.0))
    assert bs_objective(cfg, split) == pytest.approx(5.0 * (cfg.lam - 20.0) + 20.0)


def test_objective_interior(deadline):
    cfg = base_config(rho=0.7, R=3.0, deadline=deadline)
    split = BernoulliSplit(1.0, (12.0, cfg.lam - 13.0))
    ref = 3.0 + sum(l * pasta_miss(c, l, deadline) for c, l in zip(cfg.clusters, split.rates))
    assert bs_objective(cfg, split) == pytest.approx(ref, rel=1e-10)


def test_pure_routing_objective_ignores_zero_rejection():
    cfg = base_config(R=math.inf)
    split = BernoulliSplit(0.0, (18.0, cfg.lam - 18.0))
    assert math.isfinite(bs_objective(cfg, split))


# -- optimal split ---------------------------------------------------------

def test_identical_clusters_split_evenly(deadline):
    cfg = SystemConfig.from_load(0.8, math.inf, (3, 3), (2.0, 2.0), deadline)
    split, cert = solve_optimal_bs(cfg)
    assert split.lam0 == 0.0
    assert split.rates[0] == pytest.approx(cfg.lam / 2, rel=1e-9)
    assert split.rates[1] == pytest.approx(cfg.lam / 2, rel=1e-9)
    assert cert.holds()


def test_low_rejection_cost_rejects_everything(deadline):
    cfg = base_config(R=0.001, deadline=deadline)
    split, cert = solve_optimal_bs(cfg)
    assert split.lam0 == pytest.approx(cfg.lam)
    assert all(r == 0 for r in split.rates)
    assert cert.holds()


def test_base_instance_against_grid():
    cfg = base_config(rho=0.9, R=5.0)
    split, cert = solve_optimal_bs(cfg)
    assert cert.holds()
    assert cert.case is LoadCase.MEDIUM
    assert split.lam0 == 0.0
    assert split.rates[0] == pytest.approx(17.9229297, abs=1e-6)
    assert bs_objective(cfg, split) == pytest.approx(grid_search_bs(cfg), abs=1e-5)
    assert bs_objective(cfg, split) <= grid_search_bs(cfg) + 1e-9


@pytest.mark.parametrize("rho", [0.3, 0.9, 0.97])
def test_unit_rejection_cost_keeps_queues_interior(rho, deadline):
    cfg = base_config(rho=rho, R=1.0, deadline=deadline)
    split, cert = solve_optimal_bs(cfg)
    assert all(r < c.capacity for r, c in zip(split.rates, cfg.clusters))
    assert all(s is not QueueStatus.SATURATED for s in cert.status)


def test_split_conserves_rate(deadline):
    for rho in (0.2, 0.6, 0.95):
        for R in (0.5, 1.0, 5.0, math.inf):
            cfg = base_config(rho=rho, R=R, deadline=deadline)
            split, cert = solve_optimal_bs(cfg)
            assert split.total == pytest.approx(cfg.lam, rel=1e-10)
            assert all(0 <= r <= c.capacity for r, c in zip(split.rates, cfg.clusters))
            assert cert.holds()


def test_monotone_in_rejection_cost():
    lam0 = [solve_optimal_bs(base_config(rho=0.95, R=R))[0].lam0 for R in (0.5, 1.0, 1.5, 2.0, 5.0)]
    assert all(a >= b - 1e-9 for a, b in zip(lam0, lam0[1:]))


def test_monotone_in_arrival_rate():
    rates = [solve_optimal_bs(base_config(rho=rho, R=math.inf))[0].rates for rho in (0.2, 0.5, 0.8, 0.95)]
    for a, b in zip(rates, rates[1:]):
        assert all(x <= y + 1e-9 for x, y in zip(a, b))


def test_heavy_load_saturates_fast_cluster():
    # a strong preference for the fast cluster under pure routing at high load
    cfg = SystemConfig.from_load(0.97, math.inf, (1, 4), (20.0, 1.0), Constant(0.5))
    split, cert = solve_optimal_bs(cfg)
    assert cert.holds()
    assert split.total == pytest.approx(cfg.lam, rel=1e-10)


def test_certificate_detects_bad_split():
    cfg = base_config(rho=0.9, R=5.0)
    split, cert = solve_optimal_bs(cfg)
    bad = BernoulliSplit(0.0, (split.rates[0] + 1.0, split.rates[1] - 1.0))
    assert not kkt_certificate(cfg, bad, cert.alpha_star, cert.case).holds()


def test_evaluate_split_matches_objective(deadline):
    cfg = base_config(rho=0.8, R=2.0, deadline=deadline)
    split, _ = solve_optimal_bs(cfg)
    ev = evaluate_split(cfg, split)
    assert ev["g"] == pytest.approx(bs_objective(cfg, split), rel=1e-12)
    assert ev["g"] == pytest.approx(cfg.lam * (cfg.R * ev["p"] + ev["q"]), rel=1e-10)


@settings(max_examples=15, deadline=None)
@given(m1=st.integers(1, 8), m2=st.integers(1, 8), mu1=st.floats(0.5, 6), mu2=st.floats(0.5, 6),
       rho=st.floats(0.05, 0.97), R=st.one_of(st.floats(0.2, 30), st.just(math.inf)),
       family=st.sampled_from(list(DEADLINES)))
def test_kkt_random(m1, m2, mu1, mu2, rho, R, family):
    cfg = SystemConfig.from_load(rho, R, (m1, m2), (mu1, mu2), DEADLINES[family])
    split, cert = solve_optimal_bs(cfg)
    assert cert.holds(1e-8)
    assert split.total == pytest.approx(cfg.lam, rel=1e-10)
