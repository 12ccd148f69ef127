import sys

import numpy as np
import pytest

from deadline_dispatch.model import ClusterConfig, Constant, Exponential, SystemConfig, Uniform

BASE_M = (4, 8)
BASE_MU = (5.0, 3.0)

DEADLINES = {
    "const": Constant(1.0),
    "unif": Uniform(0.3, 1.7),
    "exp": Exponential(1.0),
}


def base_config(rho=0.9, R=5.0, deadline=None, m=BASE_M, mu=BASE_MU):
    return SystemConfig.from_load(rho, R, m, mu, deadline or Constant(1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=list(DEADLINES), ids=list(DEADLINES))
def deadline(request):
    return DEADLINES[request.param]


def mmm_stationary(cluster: ClusterConfig, lam: float, X: int) -> np.ndarray:
    """Stationary queue-length law of an M/M/m queue, truncated at ``X``."""
    x = np.arange(X + 1)
    rates = cluster.service_rate(np.arange(1, X + 1))
    logp = np.concatenate(([0.0], np.cumsum(np.log(lam) - np.log(rates))))
    p = np.exp(logp - logp.max())
    return p / p.sum() if X > 0 else np.ones(1) + 0 * x


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
