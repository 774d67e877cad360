"""Daily route choice of a single Karma user.

A traveling user with Karma ``k``, reference ``k_ref`` and urgency ``s``
picks an arc ``j`` now and a fractional plan ``ybar`` for the next ``T``
days, minimising ``s*d_j + T*s_mean*d @ ybar`` subject to

    k - p_j - T * p @ ybar >= k_ref      (end-of-horizon reserve)
    p_j <= k                             (today's budget)

The closed form works on arcs with strictly increasing discomfort and
strictly decreasing prices.  ``reduce_arcs`` removes dominated arcs and
discomfort duplicates so any instance can be brought into that shape.

Everything below ``_plan_values`` is vectorised over users: ``k`` and
``k_ref`` are arrays, prices and discomforts are shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FeasibilityError, OrderingError, ValidationError
from .network import Network, Population, SensitivityDistribution

THRESHOLD_TOL = 1e-12
ORACLE_TOL = 1e-9
_CHUNK = 4096


@dataclass(frozen=True)
class UserContext:
    k: int
    k_ref: int
    s: float
    T: int = 4

    def __post_init__(self):
        if self.k < 0 or self.k_ref < 0:
            raise ValidationError("Karma and reference Karma must be nonnegative")
        if self.T < 1:
            raise ValidationError("horizon T must be >= 1")
        if self.s < 0:
            raise ValidationError("sensitivity must be nonnegative")


@dataclass(frozen=True)
class ArcReduction:
    unreasonable: tuple  # dominated by a cheaper-or-equal, strictly faster arc
    duplicates: tuple    # same discomfort as a cheaper (or equal, lower-index) arc
    kept: tuple          # survivors, ordered by increasing discomfort


@dataclass(frozen=True)
class ThresholdTable:
    """Urgency thresholds for one user over a strictly ordered arc set.

    ``gamma[j]`` (j = 0..q) are the saturated thresholds on ``s / s_mean``;
    arc ``a`` (0-based) is chosen on ``[gamma[a+1], gamma[a]]`` when
    ``admissible[a]``.  ``gamma_raw`` holds the same values before
    saturation, with ``-inf``/``+inf`` at the ends.
    """

    gamma: np.ndarray
    gamma_raw: np.ndarray
    gamma_bar: np.ndarray
    gamma_under: np.ndarray
    future_plans: np.ndarray
    future_values: np.ndarray
    feasible: np.ndarray
    admissible: np.ndarray


@dataclass(frozen=True)
class BestResponseSolution:
    arc: int
    future_plan: np.ndarray
    objective: float
    optimal_arcs: tuple


def feasibility_threshold(k_ref, p, T: int):
    """Smallest Karma level for which the user's problem is feasible."""
    return np.maximum(0, np.asarray(k_ref) + int(np.min(p)) * (T + 1))


def is_feasible(ctx: UserContext, p) -> bool:
    return bool(ctx.k >= feasibility_threshold(ctx.k_ref, p, ctx.T))


def attractive_bound(k_ref, p, T: int):
    """Upper end of the invariant Karma interval ``[0, bound]``."""
    p = np.asarray(p)
    return np.asarray(k_ref) + (T + 1) * int(p.max()) - int(p.min())


def reduce_arcs(d, p) -> ArcReduction:
    """Split arcs into unreasonable, duplicate and kept sets."""
    d = np.asarray(d, dtype=float)
    p = np.asarray(p)
    n = d.size
    if p.shape != d.shape:
        raise ValidationError("discomfort and price vectors differ in length")
    unreasonable = []
    duplicates = []
    for j in range(n):
        if np.any((p <= p[j]) & (d < d[j])):
            unreasonable.append(j)
            continue
        same = (d == d[j]) & ((p < p[j]) | ((p == p[j]) & (np.arange(n) < j)))
        if np.any(same):
            duplicates.append(j)
    removed = set(unreasonable) | set(duplicates)
    kept = sorted((j for j in range(n) if j not in removed), key=lambda j: (d[j], j))
    return ArcReduction(tuple(unreasonable), tuple(duplicates), tuple(kept))


def _check_ordered(p, d):
    if np.any(np.diff(d) <= 0) or np.any(np.diff(p) >= 0):
        raise OrderingError(
            "arcs must have strictly increasing discomfort and strictly decreasing "
            "prices; apply reduce_arcs first"
        )


def _plan_values(k, base, p, d, T):
    """Optimal future plans for fixed integer choices.

    ``base[m, c]`` is ``k_ref + p_choice``; the reserve constraint reads
    ``k - base - T * p @ ybar >= 0``.  ``p`` and ``d`` describe the strictly
    ordered arcs the plan may use.  For each anchor arc ``a`` the partner is
    the window-admissible arc with the smallest discomfort-per-Karma ratio,
    and the best anchor wins; above the top threshold the plan is pure arc 0.

    Returns ``(values, plans)`` with shapes ``(m, c)`` and ``(m, c, q)``;
    values are ``inf`` where no plan satisfies the reserve.
    """
    q = p.size
    k = np.asarray(k, dtype=float)
    thr = base[..., None] + T * p  # k(choice, a)
    kk = k[:, None, None]
    values = np.full(base.shape, np.inf)
    plans = np.zeros(base.shape + (q,))

    top = kk[..., 0] >= thr[..., 0]
    values[top] = d[0]
    plans[..., 0][top] = 1.0

    if q == 1:
        return values, plans
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (d[None, :] - d[:, None]) / (p[:, None] - p[None, :])
    np.fill_diagonal(ratio, np.inf)
    lo = np.minimum(thr[..., :, None], thr[..., None, :])
    hi = np.maximum(thr[..., :, None], thr[..., None, :])
    kk4 = k[:, None, None, None]
    cand = (lo <= kk4) & (kk4 <= hi)
    score = np.where(cand, ratio, np.inf)
    partner = np.argmin(score, axis=-1)  # lowest index on ties
    has_partner = np.isfinite(np.take_along_axis(score, partner[..., None], axis=-1)[..., 0])

    thr_partner = np.take_along_axis(thr, partner, axis=-1)
    denom = T * (p - p[partner])
    with np.errstate(divide="ignore", invalid="ignore"):
        w_anchor = (kk - thr_partner) / denom
        w_partner = -(kk - thr) / denom
        cost = np.where(has_partner, d * w_anchor + d[partner] * w_partner, np.inf)
    anchor = np.argmin(cost, axis=-1)
    best = np.take_along_axis(cost, anchor[..., None], axis=-1)[..., 0]

    mixed = ~top & np.isfinite(best)
    values[mixed] = best[mixed]
    wa = np.take_along_axis(w_anchor, anchor[..., None], axis=-1)[..., 0]
    wp = np.take_along_axis(w_partner, anchor[..., None], axis=-1)[..., 0]
    jp = np.take_along_axis(partner, anchor[..., None], axis=-1)[..., 0]
    mi = np.nonzero(mixed)
    plans[mi + (anchor[mi],)] = wa[mi]
    plans[mi + (jp[mi],)] = wp[mi]
    return values, plans


@dataclass(frozen=True)
class BatchThresholds:
    """Thresholds for many users over one strictly ordered arc set (q arcs)."""

    gamma_raw: np.ndarray     # (m, q+1)
    gamma_bar: np.ndarray     # (m, q)
    gamma_under: np.ndarray   # (m, q)
    values: np.ndarray        # (m, q)
    plans: np.ndarray         # (m, q, q)
    feasible: np.ndarray      # (m, q)
    admissible: np.ndarray    # (m, q)


def batch_thresholds(k, k_ref, p, d, T: int) -> BatchThresholds:
    """Closed-form thresholds for arrays of Karma levels on ordered arcs."""
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    _check_ordered(p, d)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    k_ref = np.broadcast_to(np.asarray(k_ref, dtype=float), k.shape)
    if k.size > _CHUNK:
        parts = [batch_thresholds(k[i:i + _CHUNK], k_ref[i:i + _CHUNK], p, d, T)
                 for i in range(0, k.size, _CHUNK)]
        return BatchThresholds(*(np.concatenate([getattr(b, f) for b in parts])
                                 for f in BatchThresholds.__dataclass_fields__))
    q = p.size
    base = k_ref[:, None] + p[None, :]
    values, plans = _plan_values(k, base, p, d, T)
    feasible = (k[:, None] >= p) & (k[:, None] >= base + T * p[-1]) & (k[:, None] >= 0)
    values = np.where(feasible, values, np.inf)

    # G[i, j] for i < j: urgency ratio above which the faster arc i beats j
    with np.errstate(invalid="ignore"):
        G = T * (values[:, :, None] - values[:, None, :]) / (d[None, None, :] - d[None, :, None])
    G = np.where(feasible[:, :, None], G, np.inf)
    upper = np.triu(np.ones((q, q), dtype=bool), 1)
    gamma_under = np.where(upper[None], G, -np.inf).max(axis=2)   # max over slower arcs
    gamma_bar = np.where(upper[None], G, np.inf).min(axis=1)      # min over faster arcs
    admissible = feasible & (gamma_bar >= gamma_under - THRESHOLD_TOL)

    m = k.size
    gamma = np.empty((m, q + 1))
    gamma[:, 0] = np.inf
    gamma[:, q] = -np.inf
    for j in range(q - 1, 0, -1):
        gamma[:, j] = np.where(admissible[:, j], gamma_bar[:, j], gamma[:, j + 1])
    return BatchThresholds(gamma, gamma_bar, gamma_under, values, plans, feasible, admissible)


def threshold_table(k, k_ref, p, d, T: int, sens: SensitivityDistribution) -> ThresholdTable:
    """Threshold table for one user on strictly ordered arcs."""
    bt = batch_thresholds([k], [k_ref], p, d, T)
    if not bt.feasible[0].any():
        raise FeasibilityError(f"no feasible arc for k={k}, k_ref={k_ref}")
    lo, hi = sens.low / sens.mean, sens.high / sens.mean
    gamma = np.clip(bt.gamma_raw[0], lo, hi)
    return ThresholdTable(
        gamma=gamma,
        gamma_raw=bt.gamma_raw[0],
        gamma_bar=bt.gamma_bar[0],
        gamma_under=bt.gamma_under[0],
        future_plans=bt.plans[0],
        future_values=bt.values[0],
        feasible=bt.feasible[0],
        admissible=bt.admissible[0],
    )


def _scan(bt: BatchThresholds, sigma, d, T: int) -> np.ndarray:
    """Lowest admissible arc whose threshold interval contains ``sigma``."""
    g = bt.gamma_raw
    sigma = np.asarray(sigma, dtype=float)[:, None]
    hit = bt.admissible & (g[:, 1:] <= sigma) & (sigma <= g[:, :-1])
    arc = np.argmax(hit, axis=1)
    miss = ~hit.any(axis=1)
    if miss.any():
        # only reachable through round-off at a degenerate threshold
        obj = np.where(bt.feasible, sigma * d + T * bt.values, np.inf)
        arc[miss] = np.argmin(obj[miss], axis=1)
    return arc


@dataclass(frozen=True)
class BatchResponse:
    arcs: np.ndarray        # chosen original arc index per user
    objectives: np.ndarray  # (m, n) objective of every arc, inf if infeasible
    best: np.ndarray        # objective of the chosen arc


def batch_best_response(k, k_ref, s, p, d, T: int, sens: SensitivityDistribution) -> BatchResponse:
    """Best responses of many users facing the same prices and discomforts.

    Arcs may come in any order; dominated arcs and duplicates are removed
    first and the closed form runs on the survivors.
    """
    p = np.asarray(p)
    d = np.asarray(d, dtype=float)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    k_ref = np.broadcast_to(np.asarray(k_ref, dtype=float), k.shape)
    s = np.broadcast_to(np.asarray(s, dtype=float), k.shape)
    if np.any(k < feasibility_threshold(k_ref, p, T)):
        raise FeasibilityError("some users have no feasible route")
    red = reduce_arcs(d, p)
    kept = np.asarray(red.kept)
    pk = p[kept].astype(float)
    dk = d[kept]
    bt = batch_thresholds(k, k_ref, pk, dk, T)
    sigma = s / sens.mean
    local = _scan(bt, sigma, dk, T)
    chosen = kept[local]
    obj = _objectives(k, k_ref, s, p, d, T, sens.mean, red)
    best = obj[np.arange(k.size), chosen]
    tie = np.abs(obj - best[:, None]) <= THRESHOLD_TOL * np.maximum(1.0, np.abs(best))[:, None]
    arcs = np.argmax(tie, axis=1)
    return BatchResponse(arcs=arcs, objectives=obj, best=best)


def _objectives(k, k_ref, s, p, d, T, s_mean, red):
    # future plans only use the kept arcs
    kept = np.asarray(red.kept)
    base = k_ref[:, None] + p[None, :].astype(float)
    values, _ = _plan_values(k, base, p[kept].astype(float), d[kept], T)
    feas = (k[:, None] >= p) & np.isfinite(values)
    return np.where(feas, s[:, None] * d[None, :] + T * s_mean * values, np.inf)


def arc_objectives(k, k_ref, s, p, d, T: int, sens: SensitivityDistribution) -> np.ndarray:
    """Daily objective ``(m, n)`` of taking each arc today, ``inf`` where unaffordable."""
    p = np.asarray(p)
    d = np.asarray(d, dtype=float)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    k_ref = np.broadcast_to(np.asarray(k_ref, dtype=float), k.shape)
    s = np.broadcast_to(np.asarray(s, dtype=float), k.shape)
    return _objectives(k, k_ref, s, p, d, T, sens.mean, reduce_arcs(d, p))


def best_response(ctx: UserContext, p, x, net: Network,
                  sens: SensitivityDistribution | None = None) -> BestResponseSolution:
    """Closed-form optimal arc and future plan for one traveling user."""
    sens = sens or SensitivityDistribution()
    return best_response_d(ctx, p, net.discomfort(x), sens)


def best_response_d(ctx: UserContext, p, d, sens: SensitivityDistribution) -> BestResponseSolution:
    p = np.asarray(p)
    if not is_feasible(ctx, p):
        raise FeasibilityError(
            f"k={ctx.k} below feasibility threshold {int(feasibility_threshold(ctx.k_ref, p, ctx.T))}")
    br = batch_best_response([ctx.k], [ctx.k_ref], [ctx.s], p, d, ctx.T, sens)
    arc = int(br.arcs[0])
    red = reduce_arcs(d, p)
    kept = np.asarray(red.kept)
    base = np.array([[ctx.k_ref + p[arc]]], dtype=float)
    _, plan = _plan_values(np.array([float(ctx.k)]), base, p[kept].astype(float),
                           np.asarray(d, dtype=float)[kept], ctx.T)
    full = np.zeros(p.size)
    full[kept] = plan[0, 0]
    obj = br.objectives[0]
    tie = np.abs(obj - br.best[0]) <= THRESHOLD_TOL * max(1.0, abs(br.best[0]))
    return BestResponseSolution(
        arc=arc,
        future_plan=full,
        objective=float(br.best[0]),
        optimal_arcs=tuple(int(j) for j in np.nonzero(tie)[0]),
    )


def oracle_best_response(ctx: UserContext, p, x, net: Network,
                         sens: SensitivityDistribution | None = None) -> BestResponseSolution:
    sens = sens or SensitivityDistribution()
    return oracle_best_response_d(ctx, p, net.discomfort(x), sens)


def oracle_best_response_d(ctx: UserContext, p, d, sens: SensitivityDistribution) -> BestResponseSolution:
    """Exhaustive search over integer choices and LP vertices.

    For each affordable arc j the future plan is the cheapest vertex of
    ``{ybar in simplex : p @ ybar <= budget}``: pure plans ``e_i`` within
    budget and two-arc mixes that spend the budget exactly.  No ordering or
    reduction is assumed.
    """
    p = [int(v) for v in p]
    d = [float(v) for v in d]
    n = len(p)
    if not is_feasible(ctx, p):
        raise FeasibilityError("infeasible user problem")
    T, sbar = ctx.T, sens.mean
    best = []
    for j in range(n):
        if p[j] > ctx.k:
            continue
        budget = (ctx.k - ctx.k_ref - p[j]) / T
        cand = []
        for i in range(n):
            if p[i] <= budget:
                e = [0.0] * n
                e[i] = 1.0
                cand.append((d[i], e))
        for a in range(n):
            for i in range(n):
                if p[a] < budget < p[i]:
                    w = (budget - p[a]) / (p[i] - p[a])
                    e = [0.0] * n
                    e[i] += w
                    e[a] += 1.0 - w
                    cand.append((d[i] * w + d[a] * (1.0 - w), e))
        if not cand:
            continue
        value, plan = min(cand, key=lambda c: c[0])
        best.append((ctx.s * d[j] + T * sbar * value, j, plan))
    if not best:
        raise FeasibilityError("no affordable arc")
    top = min(b[0] for b in best)
    ties = [b for b in best if b[0] <= top + ORACLE_TOL * max(1.0, abs(top))]
    obj, arc, plan = min(ties, key=lambda b: b[1])
    return BestResponseSolution(arc=arc, future_plan=np.array(plan), objective=top,
                                optimal_arcs=tuple(b[1] for b in ties))


def batch_choice_probabilities(k, k_ref, p, d, T: int, sens: SensitivityDistribution) -> np.ndarray:
    """Arc-choice probabilities ``(m, n)`` integrating the urgency density.

    Dominated arcs get probability zero; equal discomforts make the choice
    non-deterministic and raise :class:`OrderingError`.
    """
    p = np.asarray(p)
    d = np.asarray(d, dtype=float)
    red = reduce_arcs(d, p)
    if red.duplicates:
        raise OrderingError(f"arcs {red.duplicates} share a discomfort value; "
                            "choice probabilities are not determined")
    kept = np.asarray(red.kept)
    bt = batch_thresholds(k, k_ref, p[kept], d[kept], T)
    s_hi = sens.mean * bt.gamma_raw[:, :-1]
    s_lo = sens.mean * bt.gamma_raw[:, 1:]
    if sens.high == sens.low:
        local = _scan(bt, np.full(bt.gamma_raw.shape[0], 1.0), d[kept], T)
        mass = np.zeros(bt.admissible.shape)
        mass[np.arange(local.size), local] = 1.0
    else:
        mass = np.where(bt.admissible, sens.mass(s_lo, s_hi), 0.0)
    out = np.zeros((mass.shape[0], p.size))
    out[:, kept] = mass
    return out


def choice_probability(k, k_ref, p, x, net: Network, population: Population) -> np.ndarray:
    """Probability that a traveling user at Karma ``k`` picks each arc."""
    T = population.horizon
    if k < feasibility_threshold(k_ref, p, T):
        raise FeasibilityError(f"k={k} infeasible for k_ref={k_ref}")
    return batch_choice_probabilities([k], [k_ref], p, net.discomfort(x), T,
                                      population.sensitivity)[0]


def choice_landscape(k_grid, s_grid, k_ref, p, d, T: int, sens: SensitivityDistribution) -> np.ndarray:
    """Optimal arc on the ``(k, s)`` grid, shape ``(len(k_grid), len(s_grid))``."""
    kk, ss = np.meshgrid(np.asarray(k_grid, dtype=float), np.asarray(s_grid, dtype=float), indexing="ij")
    k, s = kk.ravel(), ss.ravel()
    arcs = np.concatenate([batch_best_response(k[i:i + _CHUNK], k_ref, s[i:i + _CHUNK], p, d, T, sens).arcs
                           for i in range(0, k.size, _CHUNK)])
    return arcs.reshape(kk.shape)
