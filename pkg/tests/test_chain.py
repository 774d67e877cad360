import numpy as np
import pytest
import scipy.sparse as sp

from conftest import P_REF
from karma_routing.best_response import attractive_bound, batch_choice_probabilities
from karma_routing.chain import (arc_selection_matrix, build_chain, enumerate_states,
                                 stationary_distribution, transition_matrix)
from karma_routing.errors import ConvergenceError, ResourceError
from karma_routing.network import Population, SensitivityDistribution


@pytest.fixture(scope="module")
def commuter_chain(net, optimum, population):
    return build_chain(79, 0, P_REF, net.discomfort(optimum.x_star), population)


def test_commuter_chain_invariants(commuter_chain, population):
    ch = commuter_chain
    A = ch.A
    np.testing.assert_allclose(np.asarray(A.sum(axis=0)).ravel(), 1.0, atol=1e-12)
    assert A.min() >= 0
    assert ch.pi_inf.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(A @ ch.pi_inf - ch.pi_inf)) <= 1e-10
    assert np.all(ch.pi_inf >= 0)
    bound = int(attractive_bound(0, P_REF, 4))
    assert bound == 519 - 79  # k_ref + (T+1) max p - min p
    assert ch.states.min() >= 0 and ch.states.max() <= max(bound, 79)
    assert ch.pi_inf[ch.states > bound].sum() <= 1e-10
    np.testing.assert_allclose(ch.P_sel.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(A.diagonal() >= population.p_home - 1e-15)


def test_off_diagonal_mass_matches_selection(commuter_chain, population):
    ch = commuter_chain
    A = ch.A.toarray()
    off = A.sum(axis=0) - np.diag(A)
    # a zero-price arc would land on the diagonal; none here
    np.testing.assert_allclose(off, population.p_go * ch.P_sel.sum(axis=0), atol=1e-12)
    assert np.all((A != 0).sum(axis=0) <= 6)


def test_states_match_breadth_first_reference(net, optimum, population):
    d = net.discomfort(optimum.x_star)
    states = enumerate_states(79, 0, P_REF, d, population)
    seen, stack = {79}, [79]
    while stack:
        k = stack.pop()
        pr = batch_choice_probabilities([k], 0, P_REF, d, 4, population.sensitivity)[0]
        for j in np.nonzero(pr > 0)[0]:
            nxt = k - int(P_REF[j])
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    assert list(states) == sorted(seen)


def test_high_start_only_moves_down(net, optimum, population):
    d = net.discomfort(optimum.x_star)
    ch = build_chain(900, 0, P_REF, d, population)
    bound = int(attractive_bound(0, P_REF, 4))
    A = ch.A.tocsc()
    for v in np.nonzero(ch.states > bound)[0]:
        rows = A[:, v].nonzero()[0]
        assert np.all(ch.states[rows[rows != v]] < ch.states[v])


def test_two_arc_interior_state():
    # p = [1, -1], T = 2, k = 1: threshold at s = 1, half the urgency mass each way
    pop = Population(p_home=0.05, horizon=2, sensitivity=SensitivityDistribution(0.0, 2.0))
    d = np.array([1.0, 2.0])
    probs = batch_choice_probabilities([1], 0, [1, -1], d, 2, pop.sensitivity)[0]
    np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)
    states = np.array([0, 1, 2])
    A = transition_matrix(states, np.array([[0.0, 1.0], probs, [1.0, 0.0]]), [1, -1], pop).toarray()
    np.testing.assert_allclose(A[:, 1], [pop.p_go / 2, pop.p_home, pop.p_go / 2], atol=1e-15)


def test_poor_start_must_earn_first():
    pop = Population(p_home=0.05, horizon=1)
    states = enumerate_states(0, 0, [1, -1], [1.0, 2.0], pop)
    assert states[0] == 0 and 1 in states


def test_nobody_travels_gives_identity():
    pop = Population(p_home=1.0, horizon=2)
    ch = build_chain(5, 0, [3, -2], [1.0, 2.0], pop)
    assert list(ch.states) == [5]
    np.testing.assert_array_equal(ch.A.toarray(), [[1.0]])
    np.testing.assert_array_equal(ch.pi_inf, [1.0])


def test_identity_keeps_the_start():
    pi = stationary_distribution(sp.identity(4, format="csc"), 2)
    np.testing.assert_array_equal(pi, [0, 0, 1, 0])


def test_birth_death_detailed_balance():
    # up with a, down with b, stay otherwise
    a, b = 0.3, 0.2
    A = np.array([[1 - a, b, 0.0], [a, 1 - a - b, b], [0.0, a, 1 - b]])
    r = a / b
    expected = np.array([1, r, r * r]) / (1 + r + r * r)
    for method in ("power", "direct"):
        pi = stationary_distribution(sp.csc_matrix(A), 0, method=method)
        np.testing.assert_allclose(pi, expected, atol=1e-10)


def test_reducible_chain_keeps_start_class():
    # two absorbing states reachable from the middle: power limit splits mass
    A = sp.csc_matrix(np.array([[1.0, 0.25, 0.0], [0.0, 0.5, 0.0], [0.0, 0.25, 1.0]]))
    for method in ("power", "direct"):
        np.testing.assert_allclose(stationary_distribution(A, 1, method=method), [0.5, 0, 0.5], atol=1e-10)
        np.testing.assert_allclose(stationary_distribution(A, 0, method=method), [1, 0, 0], atol=1e-10)


def test_periodic_chain_does_not_converge():
    A = sp.csc_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ConvergenceError):
        stationary_distribution(A, 0, max_iter=1000)


def test_direct_and_power_agree(net, optimum, population):
    d = net.discomfort(optimum.x_star)
    for k_ref in (0, 39, 79):
        a = build_chain(79, k_ref, P_REF, d, population, method="power")
        b = build_chain(79, k_ref, P_REF, d, population, method="direct")
        np.testing.assert_allclose(a.pi_inf, b.pi_inf, atol=1e-9)


def test_probability_conservation(commuter_chain):
    rng = np.random.default_rng(0)
    v = rng.random(commuter_chain.states.size)
    v /= v.sum()
    assert (commuter_chain.A @ v).sum() == pytest.approx(1.0, abs=1e-12)


def test_state_cap(net, optimum, population):
    with pytest.raises(ResourceError):
        build_chain(79, 0, P_REF, net.discomfort(optimum.x_star), population, max_states=100)


def test_selection_matrix_is_transpose():
    probs = np.array([[0.2, 0.8], [1.0, 0.0]])
    np.testing.assert_array_equal(arc_selection_matrix(probs), probs.T)


def test_chain_matches_single_agent_walk(net, optimum, population):
    # empirical visit frequencies of one simulated user approach pi_inf
    d = net.discomfort(optimum.x_star)
    ch = build_chain(79, 0, P_REF, d, population, method="direct")
    probs = batch_choice_probabilities(ch.states, 0, P_REF, d, 4, population.sensitivity)
    rng = np.random.default_rng(12)
    days = 400_000
    idx = ch.index(79)
    visits = np.zeros(ch.states.size)
    go = rng.random(days) < population.p_go
    u = rng.random(days)
    cum = np.cumsum(probs, axis=1)
    for t in range(days):
        visits[idx] += 1
        if go[t]:
            j = min(int(np.searchsorted(cum[idx], u[t], side="right")), 4)
            idx = ch.index(int(ch.states[idx] - P_REF[j]))
    emp = visits / days
    # compare the arc mix rather than hundreds of small state masses
    np.testing.assert_allclose(ch.P_sel @ emp, ch.P_sel @ ch.pi_inf, atol=0.01)
