"""Parallel-arc network, BPR discomfort and societal cost."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Network:
    """Single origin-destination network of ``n`` parallel arcs.

    Discomfort on arc j is ``d0[j] * (1 + alpha * (x[j] / kappa[j]) ** beta)``
    and the per-user societal cost is ``c0[j]`` times that discomfort.
    """

    d0: np.ndarray
    kappa: np.ndarray
    c0: np.ndarray
    alpha: float = 0.15
    beta: int = 4

    def __post_init__(self):
        d0 = np.asarray(self.d0, dtype=float)
        kappa = np.asarray(self.kappa, dtype=float)
        c0 = np.asarray(self.c0, dtype=float)
        problems = []
        if d0.ndim != 1 or d0.size < 2:
            problems.append("d0: need a 1-D vector with at least 2 arcs")
        for name, arr in (("kappa", kappa), ("c0", c0)):
            if arr.shape != d0.shape:
                problems.append(f"{name}: length {arr.size} != n={d0.size}")
        for name, arr in (("d0", d0), ("kappa", kappa), ("c0", c0)):
            if arr.size and not np.all(arr > 0):
                problems.append(f"{name}: entries must be strictly positive")
        if not self.alpha >= 0:
            problems.append("alpha: must be >= 0")
        if int(self.beta) != self.beta or self.beta < 1:
            problems.append("beta: must be an integer >= 1")
        if problems:
            raise ValidationError("; ".join(problems), problems)
        for name, arr in (("d0", d0), ("kappa", kappa), ("c0", c0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", int(self.beta))

    @property
    def n(self) -> int:
        return self.d0.size

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n,):
            raise ValidationError(f"flow vector has shape {x.shape}, expected (..., {self.n})")
        return x

    def discomfort(self, x) -> np.ndarray:
        """Per-arc discomfort at flows ``x`` (broadcasts over leading axes)."""
        x = self._check(x)
        return self.d0 * (1.0 + self.alpha * (x / self.kappa) ** self.beta)

    def societal_cost(self, x) -> np.ndarray | float:
        """Total societal cost ``sum_j c0_j d_j(x_j) x_j``."""
        x = self._check(x)
        out = np.sum(self.c0 * self.discomfort(x) * x, axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def marginal_cost(self, x) -> np.ndarray:
        """Gradient of the societal cost with respect to the flows."""
        x = self._check(x)
        return self.c0 * self.d0 * (1.0 + self.alpha * (self.beta + 1) * (x / self.kappa) ** self.beta)


def discomfort(net: Network, x) -> np.ndarray:
    return net.discomfort(x)


def societal_cost(net: Network, x) -> float:
    return net.societal_cost(x)


def validate_flows(x, n: int, atol: float = 1e-12) -> np.ndarray:
    """Check that ``x`` is a valid flow vector: entries in [0, 1], total <= 1."""
    x = np.asarray(x, dtype=float)
    problems = []
    if x.shape != (n,):
        problems.append(f"flows: shape {x.shape}, expected ({n},)")
    else:
        if np.any(x < -atol) or np.any(x > 1 + atol):
            problems.append("flows: entries must lie in [0, 1]")
        if x.sum() > 1 + atol:
            problems.append("flows: total exceeds 1")
    if problems:
        raise ValidationError("; ".join(problems), problems)
    return x


@dataclass(frozen=True)
class SensitivityDistribution:
    """Uniform urgency distribution on ``[low, high]``."""

    low: float = 0.0
    high: float = 2.0

    def __post_init__(self):
        if not (0 <= self.low <= self.high):
            raise ValidationError("sensitivity: need 0 <= low <= high")
        if self.high <= 0:
            raise ValidationError("sensitivity: mean must be positive")

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    def mass(self, lo, hi):
        """Probability mass of ``[lo, hi]`` (vectorised, zero for empty intervals)."""
        lo = np.maximum(lo, self.low)
        hi = np.minimum(hi, self.high)
        width = self.high - self.low
        if width == 0:
            return ((lo <= self.low) & (self.low <= hi)).astype(float)
        return np.clip(hi - lo, 0.0, None) / width

    def sample(self, rng: np.random.Generator, size):
        return rng.uniform(self.low, self.high, size)


@dataclass(frozen=True)
class RefDistribution:
    """Discrete distribution of reference Karma levels."""

    support: tuple
    weights: tuple

    def __post_init__(self):
        support = tuple(int(v) for v in self.support)
        weights = tuple(float(w) for w in self.weights)
        problems = []
        if len(support) == 0 or len(support) != len(weights):
            problems.append("kref: support and weights must be non-empty and equally long")
        if any(v < 0 for v in support) or any(int(v) != v for v in self.support):
            problems.append("kref: support values must be nonnegative integers")
        if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-12:
            problems.append("kref: weights must be nonnegative and sum to 1")
        if problems:
            raise ValidationError("; ".join(problems), problems)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, support) -> "RefDistribution":
        support = sorted(set(int(v) for v in support))
        return cls(tuple(support), tuple(1.0 / len(support) for _ in support))

    @classmethod
    def from_prices(cls, p) -> "RefDistribution":
        """Discrete uniform on ``{0} U {p_j : p_j > 0}``."""
        return cls.uniform([0] + [int(v) for v in p if v > 0])

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        idx = rng.choice(len(self.support), size=size, p=np.asarray(self.weights))
        return np.asarray(self.support, dtype=np.int64)[idx]


@dataclass(frozen=True)
class Population:
    """User population: travel probability, horizon, urgency and reference Karma.

    ``kref`` may be ``None``; the price-dependent default (uniform on zero and
    the positive prices) is then built on demand by :meth:`kref_for`.
    """

    p_home: float = 0.05
    horizon: int = 4
    sensitivity: SensitivityDistribution = field(default_factory=SensitivityDistribution)
    kref: RefDistribution | None = None

    def __post_init__(self):
        problems = []
        if not (0.0 <= self.p_home <= 1.0):
            problems.append("p_home: must lie in [0, 1]")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            problems.append("horizon: must be an integer >= 1")
        if problems:
            raise ValidationError("; ".join(problems), problems)

    @property
    def p_go(self) -> float:
        return 1.0 - self.p_home

    def kref_for(self, p) -> RefDistribution:
        return self.kref if self.kref is not None else RefDistribution.from_prices(p)
