import numpy as np
import pytest

from karma_routing.network import Network, Population
from karma_routing.optimum import solve_system_optimum

D0 = [0.5001, 0.5734, 0.7085, 0.6512, 0.8602]
KAPPA = [0.0923, 0.1863, 0.3968, 0.3456, 0.5388]
C0 = [0.7096, 0.8426, 0.9391, 0.6022, 0.5137]
P_REF = np.array([79, 63, 39, 13, -45])


@pytest.fixture(scope="session")
def net():
    return Network(D0, KAPPA, C0, alpha=0.15, beta=4)


@pytest.fixture(scope="session")
def population():
    return Population(p_home=0.05, horizon=4)


@pytest.fixture(scope="session")
def optimum(net, population):
    return solve_system_optimum(net, population.p_go)


def random_instance(rng, n=None, low=-50, high=50, T=None):
    """Strictly decreasing integer prices with a positive first and negative last entry."""
    n = n or int(rng.integers(2, 7))
    while True:
        p = np.sort(rng.choice(np.arange(low, high + 1), size=n, replace=False))[::-1]
        if p[0] > 0 and p[-1] < 0:
            break
    d = np.sort(rng.uniform(0.1, 2.0, size=n))
    T = T or int(rng.integers(1, 6))
    return p.astype(np.int64), d, T
