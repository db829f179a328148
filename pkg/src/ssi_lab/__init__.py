"""Sequence single-index models: Hermite analysis, SGD and loss landscapes.

Subpackages
-----------
hermite, quadrature
    Hermite expansions of sequence links and Gaussian expectations.
models
    Tied attention and tied/untied networks on ``L x d`` Gaussian inputs.
sgd
    One-pass spherical SGD with an exact reduced-state backend.
flow
    Deterministic overlap dynamics and hitting times.
landscape
    Population loss on the overlaps and the positional/semantic phases.
harness
    Configured sweeps, records and the ``ssi-lab`` command line.
"""
from .errors import (
    ConfigError,
    ConvergenceWarning,
    DegeneratePolicyError,
    FrameError,
    GridGuardError,
    NonFiniteError,
    NumericalError,
)
from .hermite import (
    HermiteExpansion,
    HermiteTensor,
    LinkFunction,
    hermite_coeffs_1d,
    hermite_expansion,
    hermite_sum_expansion,
    hermite_sum_link,
    hermite_tensor_coeff,
    separable_expansion,
    sequence_information_exponent,
)
from .quadrature import GaussianSpec, gaussian_expectation, gh_rule, mc_expectation

__version__ = "0.1.0"
