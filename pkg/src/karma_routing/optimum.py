"""System-optimal flows: minimise the societal cost on the demand slice."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import ConvergenceError, ValidationError
from .network import Network


@dataclass(frozen=True)
class OptimumResult:
    x_star: np.ndarray
    x_star_quant: np.ndarray
    cost: float
    kkt_residual: float
    iterations: int

    def to_dict(self, net: Network | None = None) -> dict:
        out = {
            "x_star": [float(v) for v in self.x_star],
            "x_star_quant": [float(v) for v in self.x_star_quant],
            "cost": float(self.cost),
            "kkt_residual": float(self.kkt_residual),
            "iterations": int(self.iterations),
        }
        if net is not None:
            out["discomfort"] = [float(v) for v in net.discomfort(self.x_star)]
        return out


def project_capped_simplex(y, total: float) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``{x : sum(x) = total, 0 <= x <= 1}``.

    The projection is ``clip(y - tau, 0, 1)``; ``tau`` is found exactly by
    locating the linear piece of the (nonincreasing) mass function that
    crosses ``total``.
    """
    y = np.asarray(y, dtype=float)
    if not 0.0 <= total <= y.size:
        raise ValidationError(f"cannot project onto a slice with total {total} and {y.size} arcs")
    bp = np.unique(np.concatenate([y, y - 1.0]))
    mass = np.clip(y[None, :] - bp[:, None], 0.0, 1.0).sum(axis=1)
    # mass is nonincreasing along bp and mass[0] = n >= total, so a strict
    # drop below total always has a predecessor to interpolate from
    i = np.nonzero(mass <= total)[0][0]
    if mass[i] == total:
        tau = bp[i]
    else:
        lo, hi = bp[i - 1], bp[i]
        tau = lo + (mass[i - 1] - total) * (hi - lo) / (mass[i - 1] - mass[i])
    return np.clip(y - tau, 0.0, 1.0)


def kkt_residual(net: Network, x) -> float:
    """Relative first-order optimality violation on the demand slice.

    With ``lam`` the flow-weighted mean marginal cost, every used arc should
    have marginal cost ``lam`` and every unused arc at least ``lam``.
    """
    x = np.asarray(x, dtype=float)
    g = net.marginal_cost(x)
    total = x.sum()
    if total <= 0:
        return 0.0
    lam = float(np.dot(x, g) / total)
    spread = x * np.abs(g - lam) / max(total, 1e-300)
    below = np.maximum(0.0, lam - g) * (x < 1.0)
    return float(np.max(spread + below) / lam)


def solve_system_optimum(
    net: Network,
    p_go: float,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    x0=None,
    decimals: int = 3,
) -> OptimumResult:
    """Projected-gradient descent with backtracking on the demand slice."""
    if not (0.0 < p_go <= 1.0):
        raise ValidationError(f"p_go must lie in (0, 1], got {p_go}")
    if p_go > net.n:
        raise ValidationError(f"p_go={p_go} exceeds arc capacity n={net.n}")
    x = np.full(net.n, p_go / net.n) if x0 is None else project_capped_simplex(x0, p_go)

    f = net.societal_cost(x)
    g = net.marginal_cost(x)
    step = 1.0 / max(np.max(np.abs(g)), 1e-12)
    res = kkt_residual(net, x)
    it = 0
    while res > tol and it < max_iter:
        it += 1
        while True:
            x_new = project_capped_simplex(x - step * g, p_go)
            f_new = net.societal_cost(x_new)
            dx = x_new - x
            # Armijo condition for projected steps
            if f_new <= f + np.dot(g, dx) + 0.5 / step * np.dot(dx, dx) or step < 1e-20:
                break
            step *= 0.5
        g_new = net.marginal_cost(x_new)
        dg = g_new - g
        s_y = np.dot(dx, dg)
        # Barzilai-Borwein trial step for the next iteration
        step = np.dot(dx, dx) / s_y if s_y > 1e-300 else step * 2.0
        if np.allclose(x_new, x, rtol=0, atol=0):
            x, f, g = x_new, f_new, g_new
            res = kkt_residual(net, x)
            break
        x, f, g = x_new, f_new, g_new
        res = kkt_residual(net, x)
    if res > tol:
        raise ConvergenceError("system optimum did not converge", res, it)
    return OptimumResult(
        x_star=x,
        x_star_quant=quantize_flows(x, decimals),
        cost=float(net.societal_cost(x)),
        kkt_residual=res,
        iterations=it,
    )


def quantize_flows(x, decimals: int = 3) -> np.ndarray:
    """Round half away from zero to ``decimals`` places."""
    if decimals < 0:
        raise ValidationError("decimals must be >= 0")
    q = Decimal(1).scaleb(-decimals)
    return np.array([float(Decimal(repr(float(v))).quantize(q, rounding=ROUND_HALF_UP)) for v in np.ravel(x)])
