"""Exception and warning types shared across the package.

Two families matter to callers: configuration problems (bad input, caught
before any numerics run) and numerical failures (raised mid-computation).
The CLI maps them to exit codes 1 and 2.
"""
from __future__ import annotations


class ConfigError(ValueError):
    """Invalid parameters or configuration."""


class NumericalError(ArithmeticError):
    """A computation produced an unusable result."""


class NonFiniteError(NumericalError):
    """A NaN or infinity appeared where a finite value was required."""


class GridGuardError(NumericalError):
    """A tensor-product grid would exceed the resource guard."""


class FrameError(NumericalError):
    """The registered frame {w*/sqrt(d), P_1, ..., P_L} is not orthonormal."""


class DegeneratePolicyError(ConfigError):
    """A learning-rate policy evaluates to zero for the given target."""


class ConvergenceWarning(RuntimeWarning):
    """An iterative method stopped without meeting its tolerance."""
