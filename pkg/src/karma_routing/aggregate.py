"""Steady-state aggregate flows: reference-weighted mix of per-user chains."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import KarmaChain, build_chain
from .errors import ConvergenceError, OrderingError
from .network import Network, Population, RefDistribution


@dataclass(frozen=True)
class AggregateResult:
    flows: np.ndarray
    per_kref: dict = field(default_factory=dict)   # k_ref -> unweighted P_sel @ pi
    cost: float = float("nan")
    chain_sizes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "flows": [float(v) for v in self.flows],
            "cost": float(self.cost),
            "per_kref": {str(k): [float(v) for v in v_] for k, v_ in self.per_kref.items()},
            "chain_sizes": {str(k): int(v) for k, v in self.chain_sizes.items()},
        }


def check_strict_order(d) -> None:
    """Discomforts must be pairwise distinct for the chain model to be deterministic."""
    d = np.asarray(d, dtype=float)
    if np.unique(d).size != d.size:
        raise OrderingError("discomforts at the evaluation flow are not strictly ordered")


def steady_state_flows(p, x_eval, net: Network, population: Population, k0: int | None = None,
                       kref: RefDistribution | None = None, method: str = "power",
                       chains: list | None = None) -> AggregateResult:
    """``P_go * sum_kref theta(kref) * P_sel(kref) @ pi_inf(k0, kref)``.

    ``k0`` defaults to the largest price.  Pass a list as ``chains`` to
    collect the per-reference :class:`KarmaChain` objects.
    """
    p = np.asarray(p, dtype=np.int64)
    d = net.discomfort(x_eval)
    check_strict_order(d)
    kref = kref or population.kref_for(p)
    k0 = int(p.max()) if k0 is None else int(k0)
    flows = np.zeros(net.n)
    per = {}
    sizes = {}
    if population.p_go == 0:
        return AggregateResult(flows, {}, 0.0, {})
    for kr, w in zip(kref.support, kref.weights):
        ch: KarmaChain = build_chain(k0, kr, p, d, population, method=method)
        contrib = ch.P_sel @ ch.pi_inf
        per[kr] = contrib
        sizes[kr] = ch.states.size
        flows += w * contrib
        if chains is not None:
            chains.append(ch)
    flows *= population.p_go
    return AggregateResult(flows=flows, per_kref=per, cost=float(net.societal_cost(flows)),
                           chain_sizes=sizes)


def damped_fixed_point(p, net: Network, population: Population, x0, k0: int | None = None,
                       step: float = 0.3, tol: float = 1e-8, max_iter: int = 500,
                       method: str = "direct") -> AggregateResult:
    """Iterate ``x <- (1 - step) x + step * flows(p, x)`` towards a stationary equilibrium.

    Diagnostic only: existence and convergence are assumed, not guaranteed.
    """
    x = np.asarray(x0, dtype=float)
    res = np.inf
    for it in range(1, max_iter + 1):
        agg = steady_state_flows(p, x, net, population, k0=k0, method=method)
        res = float(np.max(np.abs(agg.flows - x)))
        if res <= tol:
            return agg
        x = (1.0 - step) * x + step * agg.flows
    raise ConvergenceError("damped equilibrium iteration did not converge", res, max_iter)

