"""Agent-based repeated routing game with Karma accounts.

Each day every user decides whether to travel, draws an urgency, and the
travelers settle into an equilibrium by sequential best responses.  Karma
is then debited or credited by the chosen arc's price.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .best_response import arc_objectives, batch_best_response
from .errors import ValidationError
from .network import Network, Population, RefDistribution

log = logging.getLogger(__name__)

IMPROVE_TOL = 1e-9
_SCAN_CHUNK = 16


@dataclass(frozen=True)
class KarmaInit:
    """Initial Karma law.

    ``range``: uniform integers on ``[low_factor*p1, high_factor*p1]``;
    ``two_point``: uniform on ``{low_factor*p1, high_factor*p1}``;
    ``delta``: everyone starts at ``value``.
    """

    kind: str = "range"
    low_factor: int = 25
    high_factor: int = 50
    value: int = 0

    def __post_init__(self):
        if self.kind not in ("range", "two_point", "delta"):
            raise ValidationError(f"karma_init.kind: unknown kind {self.kind!r}")
        if self.kind != "delta" and not 0 <= self.low_factor <= self.high_factor:
            raise ValidationError("karma_init: need 0 <= low_factor <= high_factor")
        if self.value < 0:
            raise ValidationError("karma_init.value: must be >= 0")

    def sample(self, rng: np.random.Generator, size: int, p1: int) -> np.ndarray:
        if self.kind == "delta":
            return np.full(size, int(self.value), dtype=np.int64)
        lo, hi = self.low_factor * int(p1), self.high_factor * int(p1)
        if self.kind == "two_point":
            return rng.choice(np.array([lo, hi], dtype=np.int64), size=size)
        return rng.integers(lo, hi + 1, size=size, dtype=np.int64)

    def mean(self, p1: int) -> float:
        if self.kind == "delta":
            return float(self.value)
        return 0.5 * (self.low_factor + self.high_factor) * p1


@dataclass
class Agents:
    karma: np.ndarray
    k_ref: np.ndarray

    @property
    def M(self) -> int:
        return self.karma.size

    def histogram(self) -> dict:
        """Empirical distribution over ``(karma, k_ref)`` pairs."""
        pairs, counts = np.unique(np.stack([self.karma, self.k_ref], axis=1), axis=0, return_counts=True)
        return {(int(a), int(b)): int(c) for (a, b), c in zip(pairs, counts)}


def init_population(M: int, karma_init: KarmaInit, kref: RefDistribution, rng: np.random.Generator,
                    p1: int) -> Agents:
    if M < 1:
        raise ValidationError("M must be >= 1")
    karma = karma_init.sample(rng, M, p1)
    k_ref = kref.sample(rng, M)
    return Agents(karma=karma, k_ref=k_ref)


@dataclass
class DayEquilibrium:
    choices: np.ndarray     # arc per traveler
    flows: np.ndarray
    converged: bool
    sweeps: int
    moves: int


CONVENTIONS = ("inclusive", "unilateral", "planned")


def _future_value(budget, p, d):
    """Cheapest plan cost with ``p @ ybar <= budget`` over the simplex (LP vertices)."""
    best = math.inf
    n = len(p)
    for i in range(n):
        if p[i] <= budget and d[i] < best:
            best = d[i]
    for a in range(n):
        if p[a] >= budget:
            continue
        for i in range(n):
            if p[i] > budget:
                w = (budget - p[a]) / (p[i] - p[a])
                v = d[i] * w + d[a] * (1.0 - w)
                if v < best:
                    best = v
    return best


def _discomforts(net, counts, M, current, convention, planned=None):
    """Discomforts a traveler on arc ``current`` weighs: ``(today, future)``.

    ``today[b]`` is what arc b costs today if the traveler takes it and
    ``future`` is the discomfort vector the future plan is priced at.
    """
    if convention == "inclusive":
        d = net.discomfort(counts / M)
        return d, d
    others = counts.astype(float)
    others[current] -= 1.0
    today = net.discomfort((others + 1.0) / M)
    if convention == "planned":
        return today, planned
    return today, net.discomfort(others / M)


def _agent_objectives(k, k_ref, s, p, today, d, T, s_mean):
    out = []
    for b in range(len(p)):
        if p[b] > k:
            out.append(math.inf)
            continue
        v = _future_value((k - k_ref - p[b]) / T, p, d)
        out.append(s * today[b] + T * s_mean * v)
    return out


def _unhappy(karma, k_ref, s, choices, counts, p, net, population, M, convention, planned=None):
    """Indices of travelers with a strictly better arc, by the closed form."""
    T, sens = population.horizon, population.sensitivity
    m = karma.size
    obj = np.empty((m, net.n))
    for a in np.unique(choices):
        grp = np.nonzero(choices == a)[0]
        today, future = _discomforts(net, counts, M, a, convention, planned)
        obj[grp] = (arc_objectives(karma[grp], k_ref[grp], s[grp], p, future, T, sens)
                    + s[grp, None] * (today - future)[None, :])
    current = obj[np.arange(m), choices]
    best = obj.min(axis=1)
    return np.nonzero(current > best + IMPROVE_TOL * np.maximum(1.0, np.abs(best)))[0]


def daily_equilibrium(karma, k_ref, s, p, net: Network, population: Population,
                      previous_flows, M: int, rng: np.random.Generator,
                      max_sweeps: int = 50, convention: str = "unilateral") -> DayEquilibrium:
    """Sequential best-response dynamics among today's travelers.

    Travelers start from their best response to yesterday's flows.  Each
    sweep visits every traveler once in a fresh random order; a traveler
    with a strictly better arc at the current flows moves there and the
    flows are updated at once.  A sweep without moves certifies the
    equilibrium; after ``max_sweeps`` sweeps the result is flagged.

    ``convention`` fixes the flows a traveler reasons about.
    ``"inclusive"`` prices every arc, today and in the plan, at the current
    flows with the traveler's own contribution included.  ``"unilateral"``
    prices arc b today at the flows that would result from moving there
    and values the future plan at the other travelers' flows, so an
    option's cost does not depend on where the traveler currently is.
    ``"planned"`` prices today like ``"unilateral"`` but values the future
    plan at ``previous_flows``.
    """
    if convention not in CONVENTIONS:
        raise ValidationError(f"unknown equilibrium convention {convention!r}")
    T, sens = population.horizon, population.sensitivity
    n = net.n
    m = karma.size
    if m == 0:
        return DayEquilibrium(np.zeros(0, dtype=np.int64), np.zeros(n), True, 0, 0)
    planned = net.discomfort(previous_flows)
    br = batch_best_response(karma, k_ref, s, p, planned, T, sens)
    choices = br.arcs.astype(np.int64)
    counts = np.bincount(choices, minlength=n).astype(np.int64)
    p_list = [int(v) for v in p]
    s_mean = sens.mean
    moves = 0
    for sweep in range(1, max_sweeps + 1):
        # visit travelers in random order; between moves nobody's options
        # change, so scan ahead in growing chunks for the next unhappy one
        order = rng.permutation(m)
        ptr, chunk = 0, _SCAN_CHUNK
        moved = False
        while ptr < m:
            idx = order[ptr:ptr + chunk]
            bad = _unhappy(karma[idx], k_ref[idx], s[idx], choices[idx], counts, p, net, population,
                           M, convention, planned)
            if bad.size == 0:
                ptr += idx.size
                chunk *= 2
                continue
            first = int(bad.min())
            i = int(idx[first])
            ptr += first + 1
            chunk = _SCAN_CHUNK
            old = int(choices[i])
            today, future = _discomforts(net, counts, M, old, convention, planned)
            obj = _agent_objectives(int(karma[i]), int(k_ref[i]), float(s[i]), p_list,
                                    today.tolist(), future.tolist(), T, s_mean)
            top = min(obj)
            if obj[old] > top + IMPROVE_TOL * max(1.0, abs(top)):
                new = obj.index(top)
                counts[old] -= 1
                counts[new] += 1
                choices[i] = new
                moves += 1
                moved = True
        if not moved:
            return DayEquilibrium(choices, counts / M, True, sweep, moves)
    ok = _unhappy(karma, k_ref, s, choices, counts, p, net, population, M, convention,
                  planned).size == 0
    return DayEquilibrium(choices, counts / M, ok, max_sweeps, moves)


def deviation_scan(karma, k_ref, s, choices, p, net: Network, population: Population, M: int,
                   convention: str = "unilateral", previous_flows=None) -> int:
    """Number of travelers who could strictly improve by switching arcs.

    ``previous_flows`` is only needed for the ``"planned"`` convention.
    """
    if karma.size == 0:
        return 0
    counts = np.bincount(choices, minlength=net.n)
    planned = None if previous_flows is None else net.discomfort(previous_flows)
    return int(_unhappy(karma, k_ref, s, np.asarray(choices), counts, np.asarray(p), net,
                        population, M, convention, planned).size)


def random_allocation(n_travelers: int, x_star, rng: np.random.Generator) -> np.ndarray:
    """Draw an arc for each traveler from the ``x_star`` proportions, blind to urgency."""
    share = np.asarray(x_star, dtype=float)
    return rng.choice(share.size, size=n_travelers, p=share / share.sum())


@dataclass(frozen=True)
class DayMetrics:
    rel_cost: float
    dbar_literal: float
    dbar_interpreted: float
    sbar_dev: float


def metrics_day(choices, s_travel, s_all, flows, net: Network, x_star, s_mean: float,
                rng: np.random.Generator, M: int, optimal_cost: float | None = None) -> DayMetrics:
    """Cost gap, perceived-discomfort change and urgency deviation for one day.

    ``dbar_literal`` evaluates the printed ratio as written;
    ``dbar_interpreted`` is the urgency-weighted discomfort of today's
    choices relative to an urgency-blind allocation to the optimal split,
    minus one (negative means users are better off).
    """
    c_opt = float(net.societal_cost(x_star)) if optimal_cost is None else optimal_cost
    rel_cost = (float(net.societal_cost(flows)) - c_opt) / c_opt
    sbar_dev = float(np.sum((s_all - s_mean) / s_mean) / M)
    if choices.size == 0:
        return DayMetrics(rel_cost, float("nan"), float("nan"), sbar_dev)
    d = net.discomfort(flows)
    felt = d[choices]
    dbar_literal = float(np.sum(s_travel * felt + s_mean * felt) / np.sum(s_mean * felt))
    base = random_allocation(choices.size, x_star, rng)
    d_base = net.discomfort(np.bincount(base, minlength=net.n) / M)
    dbar_interp = float(np.sum(s_travel * felt) / np.sum(s_travel * d_base[base]) - 1.0)
    return DayMetrics(rel_cost, dbar_literal, dbar_interp, sbar_dev)


@dataclass
class SimTrace:
    n: int
    flows: list = field(default_factory=list)
    k_mean: list = field(default_factory=list)
    k_std: list = field(default_factory=list)
    rel_cost: list = field(default_factory=list)
    dbar_literal: list = field(default_factory=list)
    dbar_interpreted: list = field(default_factory=list)
    sbar_dev: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    travelers: list = field(default_factory=list)
    karma_total: list = field(default_factory=list)   # at the start of each day
    karma_drift: list = field(default_factory=list)   # total change over the day
    payments: list = field(default_factory=list)      # p @ (arc counts)
    sweeps: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.flows)

    def columns(self) -> list:
        return (["day"] + [f"x_{j + 1}" for j in range(self.n)]
                + ["k_mean", "k_std", "rel_cost", "dbar_literal", "dbar_interpreted",
                   "sbar_dev", "converged_flag"])

    def rows(self):
        for t in range(len(self)):
            yield ([t] + [float(v) for v in self.flows[t]]
                   + [self.k_mean[t], self.k_std[t], self.rel_cost[t], self.dbar_literal[t],
                      self.dbar_interpreted[t], self.sbar_dev[t], int(self.converged[t])])


@dataclass
class SimState:
    agents: Agents
    flows: np.ndarray
    day: int = 0


def step_day(state: SimState, p, net: Network, population: Population, x_star,
             rng: np.random.Generator, trace: SimTrace | None = None,
             optimal_cost: float | None = None, max_sweeps: int = 50,
             convention: str = "unilateral") -> SimState:
    """Advance one day: travel draws, urgency draws, equilibrium, payments, metrics."""
    p = np.asarray(p, dtype=np.int64)
    agents = state.agents
    M = agents.M
    travel = rng.random(M) < population.p_go
    s_all = population.sensitivity.sample(rng, M)
    idx = np.nonzero(travel)[0]
    eq = daily_equilibrium(agents.karma[idx], agents.k_ref[idx], s_all[idx], p, net, population,
                           state.flows, M, rng, max_sweeps=max_sweeps, convention=convention)
    total_before = int(agents.karma.sum())
    k_mean = float(agents.karma.mean())
    k_std = float(agents.karma.std())
    karma = agents.karma.copy()
    karma[idx] -= p[eq.choices]
    if np.any(karma < 0):
        raise AssertionError("negative Karma after payments")
    payments = int(p @ np.bincount(eq.choices, minlength=net.n))
    new_agents = Agents(karma=karma, k_ref=agents.k_ref)
    if trace is not None:
        met = metrics_day(eq.choices, s_all[idx], s_all, eq.flows, net, x_star,
                          population.sensitivity.mean, rng, M, optimal_cost)
        trace.flows.append(eq.flows.copy())
        trace.k_mean.append(k_mean)
        trace.k_std.append(k_std)
        trace.rel_cost.append(met.rel_cost)
        trace.dbar_literal.append(met.dbar_literal)
        trace.dbar_interpreted.append(met.dbar_interpreted)
        trace.sbar_dev.append(met.sbar_dev)
        trace.converged.append(eq.converged)
        trace.travelers.append(int(idx.size))
        trace.karma_total.append(total_before)
        trace.karma_drift.append(int(karma.sum()) - total_before)
        trace.payments.append(payments)
        trace.sweeps.append(eq.sweeps)
    flows = eq.flows if idx.size else state.flows
    return SimState(agents=new_agents, flows=flows, day=state.day + 1)


def run_simulation(net: Network, population: Population, p, x_star, days: int, M: int = 1000,
                   karma_init: KarmaInit | None = None, rng: np.random.Generator | None = None,
                   seed: int = 0, max_sweeps: int = 50, convention: str = "unilateral",
                   progress: bool = False) -> SimTrace:
    """Simulate ``days`` days; deterministic for a given ``seed`` (or generator)."""
    p = np.asarray(p, dtype=np.int64)
    rng = rng or np.random.Generator(np.random.Philox(seed))
    karma_init = karma_init or KarmaInit()
    kref = population.kref_for(p)
    agents = init_population(M, karma_init, kref, rng, int(p[0]))
    state = SimState(agents=agents, flows=np.asarray(x_star, dtype=float).copy())
    trace = SimTrace(n=net.n)
    c_opt = float(net.societal_cost(x_star))
    for t in range(days):
        state = step_day(state, p, net, population, x_star, rng, trace, c_opt, max_sweeps, convention)
        if progress and (t + 1) % 50 == 0:
            log.info("day %d: gap %.4f, mean Karma %.1f", t + 1, trace.rel_cost[-1], trace.k_mean[-1])
    return trace
