"""Per-user Karma Markov chain under stationary flows.

States are integer Karma levels reachable from ``k0``.  A column of the
transition matrix is the current level: with probability ``p_home`` the
user stays put, otherwise they pick arc j with its choice probability and
move to ``k - p_j``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from .best_response import attractive_bound, batch_choice_probabilities, feasibility_threshold
from .errors import ConvergenceError, FeasibilityError, ResourceError
from .network import Network, Population

MAX_STATES = 1_000_000


@dataclass(frozen=True)
class KarmaChain:
    states: np.ndarray      # sorted integer Karma levels
    A: sp.csc_matrix        # column-stochastic transitions
    pi_inf: np.ndarray
    P_sel: np.ndarray       # (n, |states|), column v = arc distribution at states[v]
    k0: int
    k_ref: int

    def index(self, k: int) -> int:
        i = int(np.searchsorted(self.states, k))
        if i >= self.states.size or self.states[i] != k:
            raise KeyError(k)
        return i


def _probability_table(lo, hi, k_ref, p, d, population):
    ks = np.arange(lo, hi + 1)
    return ks, batch_choice_probabilities(ks, k_ref, p, d, population.horizon, population.sensitivity)


def enumerate_states(k0: int, k_ref: int, p, d, population: Population,
                     max_states: int = MAX_STATES, _table=None) -> np.ndarray:
    """Sorted Karma levels reachable from ``k0`` through positive-probability moves."""
    states, _ = _closure(k0, k_ref, np.asarray(p), np.asarray(d, dtype=float), population, max_states)
    return states


def _closure(k0, k_ref, p, d, population, max_states):
    T = population.horizon
    if k0 < feasibility_threshold(k_ref, p, T):
        raise FeasibilityError(f"k0={k0} infeasible for k_ref={k_ref}")
    # probabilities are tabulated on [0, hi]; the attractive interval plus k0
    # covers every reachable level, and the table grows if that ever fails
    hi = int(max(k0, attractive_bound(k_ref, p, T)))
    if hi + 1 > max_states:
        raise ResourceError(f"Karma range {hi + 1} exceeds the state cap {max_states}")
    ks, probs = _probability_table(0, hi, k_ref, p, d, population)
    seen = np.zeros(hi + 1, dtype=bool)
    seen[k0] = True
    queue = deque([k0])
    go = population.p_go > 0
    while queue:
        k = queue.popleft()
        if not go:
            continue
        for j in np.nonzero(probs[k] > 0)[0]:
            nxt = k - int(p[j])
            if nxt > hi:
                new_hi = max(nxt, 2 * hi)
                if new_hi + 1 > max_states:
                    raise ResourceError(f"state space exceeds cap {max_states}")
                _, extra = _probability_table(hi + 1, new_hi, k_ref, p, d, population)
                probs = np.vstack([probs, extra])
                seen = np.concatenate([seen, np.zeros(new_hi - hi, dtype=bool)])
                hi = new_hi
            if not seen[nxt]:
                seen[nxt] = True
                queue.append(nxt)
    states = np.nonzero(seen)[0]
    if states.size > max_states:
        raise ResourceError(f"{states.size} states exceed cap {max_states}")
    return states, probs[states]


def transition_matrix(states, probs, p, population: Population) -> sp.csc_matrix:
    """Column-stochastic transition matrix from per-state arc probabilities."""
    states = np.asarray(states)
    m = states.size
    rows = [np.arange(m)]
    cols = [np.arange(m)]
    vals = [np.full(m, population.p_home)]
    for j, pj in enumerate(np.asarray(p, dtype=np.int64)):
        if population.p_go == 0:
            break
        w = probs[:, j]
        src = np.nonzero(w > 0)[0]
        dst = np.searchsorted(states, states[src] - pj)
        rows.append(dst)
        cols.append(src)
        vals.append(population.p_go * w[src])
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m, m))
    return A.tocsc()  # duplicates (p_j = 0) are summed


def stationary_distribution(A, k0_index: int, tol_change: float = 1e-12,
                            tol_residual: float = 1e-10, max_iter: int = 1_000_000,
                            method: str = "power") -> np.ndarray:
    """Limit of the power iteration of ``A`` started from the delta at ``k0``.

    ``method="direct"`` computes the same limit by a sparse solve when the
    states reachable from ``k0`` contain a single closed class (the power
    limit is then that class's stationary vector) and falls back to power
    iteration otherwise.  Both routes finish with the residual check.
    """
    A = sp.csc_matrix(A)
    m = A.shape[0]
    if method == "direct":
        pi = _direct_limit(A, k0_index)
        if pi is not None:
            res = float(np.max(np.abs(A @ pi - pi)))
            if res <= tol_residual:
                return pi
    pi = np.zeros(m)
    pi[k0_index] = 1.0
    res = np.inf
    it = 0
    Acsr = A.tocsr()
    while it < max_iter:
        nxt = Acsr @ pi
        it += 1
        res = float(np.max(np.abs(nxt - pi)))
        pi = nxt
        if res <= tol_change:
            break
    res = float(np.max(np.abs(Acsr @ pi - pi)))
    if res > tol_residual:
        raise ConvergenceError("power iteration did not converge", res, it)
    return pi


def _direct_limit(A, k0_index):
    m = A.shape[0]
    graph = (A.T != 0).astype(np.int8)  # edge v -> u when A[u, v] > 0
    reach = csgraph.breadth_first_order(graph, k0_index, directed=True, return_predecessors=False)
    n_comp, labels = csgraph.connected_components(graph, directed=True, connection="strong")
    # closed classes: no edge leaves the component
    coo = graph.tocoo()
    leaving = np.zeros(n_comp, dtype=bool)
    cross = labels[coo.row] != labels[coo.col]
    leaving[labels[coo.row[cross]]] = True
    closed = {c for c in set(labels[reach]) if not leaving[c]}
    if len(closed) != 1:
        return None
    cls = np.nonzero(labels == closed.pop())[0]
    sub = A[cls][:, cls].tocsc()
    size = cls.size
    if size == 1:
        pi = np.zeros(m)
        pi[cls] = 1.0
        return pi
    # (A - I) pi = 0 with one equation replaced by normalisation
    M = (sub - sp.identity(size, format="csc")).tolil()
    M[0, :] = np.ones(size)
    rhs = np.zeros(size)
    rhs[0] = 1.0
    sol = spsolve(M.tocsc(), rhs)
    sol = np.clip(sol, 0.0, None)
    sol /= sol.sum()
    pi = np.zeros(m)
    pi[cls] = sol
    return pi


def arc_selection_matrix(probs) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(probs).T)


def build_chain(k0: int, k_ref: int, p, d, population: Population,
                max_states: int = MAX_STATES, method: str = "power") -> KarmaChain:
    """Reachable states, transition matrix, stationary law and arc selection."""
    p = np.asarray(p, dtype=np.int64)
    d = np.asarray(d, dtype=float)
    states, probs = _closure(int(k0), int(k_ref), p, d, population, max_states)
    A = transition_matrix(states, probs, p, population)
    k0_index = int(np.searchsorted(states, k0))
    pi = stationary_distribution(A, k0_index, method=method)
    return KarmaChain(states=states, A=A, pi_inf=pi, P_sel=arc_selection_matrix(probs),
                      k0=int(k0), k_ref=int(k_ref))


def chain_for_flows(k0, k_ref, p, x, net: Network, population: Population, **kw) -> KarmaChain:
    return build_chain(k0, k_ref, p, net.discomfort(x), population, **kw)
