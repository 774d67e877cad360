import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from karma_routing.errors import ValidationError
from karma_routing.network import Network
from karma_routing.optimum import (kkt_residual, project_capped_simplex, quantize_flows,
                                   solve_system_optimum)


def test_published_optimum(net, optimum):
    np.testing.assert_allclose(optimum.x_star, [0.0877, 0.1309, 0.0, 0.3053, 0.4261], atol=1e-3)
    assert optimum.x_star.sum() == pytest.approx(0.95, abs=1e-9)
    assert optimum.kkt_residual <= 1e-9
    np.testing.assert_array_equal(optimum.x_star_quant, [0.088, 0.131, 0.0, 0.305, 0.426])


def test_first_order_conditions(net, optimum):
    g = net.marginal_cost(optimum.x_star)
    used = optimum.x_star > 1e-9
    lam = g[used].mean()
    assert np.ptp(g[used]) / lam < 1e-8
    assert np.all(g[~used] >= lam * (1 - 1e-8))


def test_identical_arcs_split_evenly():
    net = Network([1.0] * 4, [0.3] * 4, [1.0] * 4)
    res = solve_system_optimum(net, 0.8)
    np.testing.assert_allclose(res.x_star, 0.2, atol=1e-9)


def test_two_arc_grid_oracle():
    net = Network([1.0, 2.0], [0.5, 0.5], [1.0, 1.0], alpha=0.15, beta=4)
    res = solve_system_optimum(net, 0.9)
    x1 = np.linspace(0.0, 0.9, 900_001)
    flows = np.stack([x1, 0.9 - x1], axis=1)
    best = x1[np.argmin(net.societal_cost(flows))]
    assert res.x_star[0] == pytest.approx(best, abs=2e-6)


def test_start_point_does_not_matter(net):
    a = solve_system_optimum(net, 0.95)
    b = solve_system_optimum(net, 0.95, x0=[0.95, 0, 0, 0, 0])
    np.testing.assert_allclose(a.x_star, b.x_star, atol=2e-6)
    assert kkt_residual(net, b.x_star) <= 1e-9


def test_better_than_random_feasible_points(net, optimum):
    rng = np.random.default_rng(7)
    pts = []
    while len(pts) < 1000:
        x = rng.dirichlet(np.ones(5)) * 0.95
        if np.all(x <= 1):
            pts.append(x)
    assert np.all(net.societal_cost(np.array(pts)) >= optimum.cost)


def test_rejects_bad_demand(net):
    with pytest.raises(ValidationError):
        solve_system_optimum(net, 0.0)
    with pytest.raises(ValidationError):
        solve_system_optimum(net, 1.5)


def test_quantize_examples():
    np.testing.assert_array_equal(quantize_flows([0.0877, 0.1309, 0.0, 0.3053, 0.4261], 3),
                                  [0.088, 0.131, 0.0, 0.305, 0.426])
    np.testing.assert_array_equal(quantize_flows([0.5, 0.5], 0), [1.0, 1.0])
    x = np.random.default_rng(0).random(6)
    np.testing.assert_allclose(quantize_flows(x, 15), x, atol=1e-12)
    with pytest.raises(ValidationError):
        quantize_flows([0.1], -1)


def _bisection_projection(y, total):
    lo, hi = y.min() - 1.0, y.max()
    for _ in range(200):
        tau = 0.5 * (lo + hi)
        if np.clip(y - tau, 0, 1).sum() > total:
            lo = tau
        else:
            hi = tau
    return np.clip(y - 0.5 * (lo + hi), 0, 1)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8), st.floats(0.01, 1.0))
def test_projection_matches_bisection(ys, frac):
    y = np.array(ys)
    total = frac * y.size
    x = project_capped_simplex(y, total)
    assert x.sum() == pytest.approx(total, abs=1e-9)
    assert np.all(x >= 0) and np.all(x <= 1)
    np.testing.assert_allclose(x, _bisection_projection(y, total), atol=1e-9)
