"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: validation 2, convergence 3, I/O 4.
"""


class KarmaRoutingError(Exception):
    """Base class for all package errors."""


class ValidationError(KarmaRoutingError, ValueError):
    """Invalid input: wrong dimensions, out-of-range values, bad config."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class ConvergenceError(KarmaRoutingError, RuntimeError):
    """An iterative method stopped before reaching its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class FeasibilityError(KarmaRoutingError, ValueError):
    """A user's routing problem has no feasible solution."""


class OrderingError(KarmaRoutingError, ValueError):
    """Discomforts/prices are not strictly ordered where a closed form needs it.

    Reduce the arc set first (``best_response.reduce_arcs``) or pick prices
    that respect the discomfort ordering.
    """


class ResourceError(KarmaRoutingError, RuntimeError):
    """A configured resource cap (e.g. chain state count) was exceeded."""


class InfeasibleDesignError(KarmaRoutingError, ValueError):
    """No integer price vector within bounds satisfies the design constraints."""
