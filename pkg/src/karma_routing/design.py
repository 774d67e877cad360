"""Integer price design by a genetic algorithm with constraint repair.

Every candidate is repaired before evaluation so it satisfies the design
constraints: strictly decreasing prices, a positive first price, a negative
last price and zero net Karma drift ``p @ x_quant == 0``.  The objective is
the societal cost of the steady-state aggregate flows evaluated at the
system optimum; its minimum is the optimal cost, which gives a stopping
rule.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .aggregate import check_strict_order, steady_state_flows
from .errors import InfeasibleDesignError, KarmaRoutingError, ValidationError
from .network import Network, Population

log = logging.getLogger(__name__)

_MAX_OFFSETS = 20_000


@dataclass(frozen=True)
class DesignConfig:
    price_bound: int = 100
    population_size: int = 64
    generations: int = 300
    mutation_rate: float = 0.15
    crossover_rate: float = 0.8
    elite_count: int = 4
    tournament_size: int = 3
    mutation_steps: tuple = (1, 2, 5)
    subopt_stop: float = 0.005
    seed: int = 0
    k0: int | None = None  # None: the first (largest) price of each candidate
    immigrant_rate: float = 0.2
    time_limit: float | None = None  # seconds, checked between generations; breaks seed determinism

    def validate(self, n: int) -> None:
        problems = []
        if self.price_bound < n:
            problems.append(f"design.price_bound: {self.price_bound} < n={n}")
        if self.population_size < 2:
            problems.append("design.population_size: must be >= 2")
        if not 0 <= self.elite_count < self.population_size:
            problems.append("design.elite_count: must lie in [0, population_size)")
        if self.time_limit is not None and self.time_limit <= 0:
            problems.append("design.time_limit: must be > 0")
        for name in ("mutation_rate", "crossover_rate", "immigrant_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"design.{name}: must lie in [0, 1]")
        if self.generations < 0:
            problems.append("design.generations: must be >= 0")
        if problems:
            raise ValidationError("; ".join(problems), problems)


@dataclass
class DesignResult:
    p_star: np.ndarray
    achieved_cost: float
    optimal_cost: float
    relative_subopt: float
    evaluations: int
    generations_run: int
    met_target: bool
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "p_star": [int(v) for v in self.p_star],
            "achieved_cost": float(self.achieved_cost),
            "optimal_cost": float(self.optimal_cost),
            "relative_subopt": float(self.relative_subopt),
            "evaluations": int(self.evaluations),
            "generations_run": int(self.generations_run),
            "met_target": bool(self.met_target),
            "history": [float(v) for v in self.history],
        }


def integer_weights(x_quant) -> np.ndarray:
    """Smallest integer vector proportional to the quantised flows."""
    fr = [Fraction(repr(float(v))) for v in x_quant]
    den = math.lcm(*(f.denominator for f in fr))
    w = [int(f * den) for f in fr]
    g = math.gcd(*w) or 1
    return np.array([v // g for v in w], dtype=np.int64)


def satisfies_constraints(p, weights, bound: int | None = None) -> bool:
    p = np.asarray(p, dtype=np.int64)
    ok = (bool(np.all(np.diff(p) < 0)) and p[0] > 0 and p[-1] < 0
          and int(np.dot(p, weights)) == 0)
    if bound is not None:
        ok = ok and bool(np.all(np.abs(p) <= bound))
    return ok


def _order_and_sign(p, bound):
    p = np.sort(np.clip(np.asarray(p, dtype=np.int64), -bound, bound))[::-1].copy()
    for j in range(1, p.size):
        p[j] = min(p[j], p[j - 1] - 1)
    if p[0] <= 0:
        p += 1 - p[0]
    if p[-1] >= 0:
        p -= p[-1] + 1
    if p[0] <= 0 or p[-1] >= 0 or np.any(np.abs(p) > bound):
        return None
    return p


@lru_cache(maxsize=32)
def _offsets(genes: int, radius: int) -> np.ndarray:
    grid = np.array(list(itertools.product(range(-radius, radius + 1), repeat=genes)), dtype=np.int64)
    order = np.lexsort((np.abs(grid).max(axis=1), np.abs(grid).sum(axis=1)))
    return grid[order]


def repair_candidate(p_raw, x_quant, bound: int = 100, weights=None):
    """Project a raw integer vector onto the design constraints.

    Ordering and signs are fixed by sorting and shifting.  The zero-drift
    equality is then solved for the adjusting arc (the last arc with
    nonzero quantised flow).  If that needs a non-integer price, the
    smallest perturbation of the remaining priced arcs that makes it
    integral is searched.  Returns ``None`` when nothing in bounds works.
    """
    w = integer_weights(x_quant) if weights is None else np.asarray(weights, dtype=np.int64)
    p = _order_and_sign(p_raw, bound)
    if p is None:
        return None
    if satisfies_constraints(p, w, bound):
        return p
    nz = np.nonzero(w)[0]
    if nz.size == 0:
        return None
    adj = int(nz[-1])
    movable = np.array([j for j in nz if j != adj], dtype=np.int64)
    g = movable.size
    radius = 0
    # offsets wider than the price range can never stay in bounds
    while g and radius < 2 * bound and (2 * (radius + 1) + 1) ** g <= _MAX_OFFSETS:
        radius += 1
    offs = _offsets(g, radius) if g else np.zeros((1, 0), dtype=np.int64)
    cand = np.repeat(p[None, :], offs.shape[0], axis=0)
    cand[:, movable] += offs
    rest = cand @ w - cand[:, adj] * w[adj]
    ok = (rest % w[adj]) == 0
    cand[:, adj] = np.where(ok, -rest // w[adj], cand[:, adj])
    ok &= np.all(np.diff(cand, axis=1) < 0, axis=1)
    ok &= (cand[:, 0] > 0) & (cand[:, -1] < 0) & np.all(np.abs(cand) <= bound, axis=1)
    hits = np.nonzero(ok)[0]
    if hits.size == 0:
        return None
    return cand[hits[0]]


class PriceObjective:
    """Cached societal cost of the steady-state flows for integer prices."""

    def __init__(self, net: Network, x_star, population: Population, k0: int | None = None,
                 method: str = "direct"):
        self.net = net
        self.x_star = np.asarray(x_star, dtype=float)
        self.population = population
        self.k0 = k0
        self.method = method
        self.cache: dict = {}
        self.evaluations = 0

    def __call__(self, p) -> float:
        key = tuple(int(v) for v in p)
        if key not in self.cache:
            self.evaluations += 1
            try:
                res = steady_state_flows(np.array(key), self.x_star, self.net, self.population,
                                         k0=self.k0, method=self.method)
                self.cache[key] = res.cost
            except KarmaRoutingError as exc:
                log.debug("candidate %s rejected: %s", key, exc)
                self.cache[key] = math.inf
        return self.cache[key]


def design_prices(net: Network, x_star, x_star_quant, population: Population,
                  cfg: DesignConfig | None = None, objective: PriceObjective | None = None,
                  optimal_cost: float | None = None) -> DesignResult:
    """Genetic search for integer prices driving steady-state flows to ``x_star``."""
    cfg = cfg or DesignConfig()
    n = net.n
    cfg.validate(n)
    check_strict_order(net.discomfort(x_star))
    w = integer_weights(x_star_quant)
    bound = cfg.price_bound
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    f = objective or PriceObjective(net, x_star, population, k0=cfg.k0)
    c_opt = float(net.societal_cost(x_star)) if optimal_cost is None else optimal_cost

    def subopt(c):
        return (c - c_opt) / c_opt

    def immigrant():
        for _ in range(1000):
            cand = repair_candidate(rng.integers(-bound, bound + 1, size=n), x_star_quant, bound, w)
            if cand is not None:
                return cand
        return None

    pop = [c for c in (immigrant() for _ in range(cfg.population_size)) if c is not None]
    if not pop:
        raise InfeasibleDesignError(f"no price vector within |p| <= {bound} satisfies the constraints")
    while len(pop) < cfg.population_size:
        pop.append(pop[len(pop) % max(1, len(pop))].copy())

    fit = np.array([f(c) for c in pop])
    history = [float(fit.min())]
    steps = np.asarray(cfg.mutation_steps, dtype=np.int64)
    gen = 0
    start = time.monotonic()
    while (gen < cfg.generations and subopt(fit.min()) > cfg.subopt_stop
           and (cfg.time_limit is None or time.monotonic() - start < cfg.time_limit)):
        gen += 1
        order = np.argsort(fit, kind="stable")
        children = [pop[i].copy() for i in order[:cfg.elite_count]]
        seen = {tuple(c) for c in children}

        def pick():
            idx = rng.integers(0, len(pop), size=cfg.tournament_size)
            return pop[idx[np.argmin(fit[idx])]]

        while len(children) < cfg.population_size:
            a, b = pick(), pick()
            if rng.random() < cfg.crossover_rate:
                mask = rng.random(n) < 0.5
                child = np.where(mask, a, b)
            else:
                child = a.copy()
            mut = rng.random(n) < cfg.mutation_rate
            delta = rng.choice(steps, size=n) * rng.choice(np.array([-1, 1]), size=n)
            child = child + np.where(mut, delta, 0)
            fixed = repair_candidate(child, x_star_quant, bound, w)
            # duplicates and unrepairable children make room for random immigrants
            if fixed is None or tuple(fixed) in seen or rng.random() < cfg.immigrant_rate:
                fixed = immigrant()
                if fixed is None:
                    fixed = a.copy()
            seen.add(tuple(fixed))
            children.append(fixed)
        pop = children
        fit = np.array([f(c) for c in pop])
        history.append(float(fit.min()))
        log.info("generation %d: best relative gap %.5f", gen, subopt(fit.min()))

    best = int(np.argmin(fit))
    return DesignResult(
        p_star=np.asarray(pop[best], dtype=np.int64),
        achieved_cost=float(fit[best]),
        optimal_cost=c_opt,
        relative_subopt=float(subopt(fit[best])),
        evaluations=f.evaluations,
        generations_run=gen,
        met_target=bool(subopt(fit[best]) <= cfg.subopt_stop),
        history=history,
    )
