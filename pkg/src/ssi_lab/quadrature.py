"""Gauss-Hermite rules and Gaussian expectations by tensor-product quadrature.

All rules use the probabilists' weight exp(-x^2/2)/sqrt(2*pi), so that
``sum(w * f(x))`` approximates ``E[f(Z)]`` for a standard normal ``Z``.
Multivariate expectations under ``N(mu, Sigma)`` map grid points through the
lower Cholesky factor, ``x = T y + mu`` with ``Sigma = T T^T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import ConfigError, GridGuardError, NonFiniteError, NumericalError

__all__ = [
    "QuadratureRule",
    "GaussianSpec",
    "gh_rule",
    "tensor_grid",
    "gaussian_expectation",
    "mc_expectation",
    "GRID_GUARD",
    "N_INT_DYNAMICS",
    "N_INT_PHASE",
]

GRID_GUARD = 10**8
N_INT_DYNAMICS = 17
N_INT_PHASE = 19
MAX_NODES = 64
CACHE_LIMIT = 1 << 20


@dataclass(frozen=True)
class QuadratureRule:
    """One-dimensional Gauss-Hermite rule for the standard normal.

    Attributes
    ----------
    nodes : ndarray, shape (N,)
        Sorted, symmetric about zero.
    weights : ndarray, shape (N,)
        Positive, summing to one.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if x.ndim != 1 or x.shape != w.shape or x.size == 0:
            raise ConfigError("nodes and weights must be matching non-empty 1D arrays")
        if np.any(w <= 0):
            raise ConfigError("quadrature weights must be positive")
        x.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.nodes.size

    def expect(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        """Return ``E[f(Z)]`` for scalar ``Z ~ N(0, 1)``."""
        vals = np.asarray(f(self.nodes), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError("integrand is not finite at a quadrature node")
        return float(math.fsum(self.weights * vals))


@lru_cache(maxsize=None)
def gh_rule(n: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule with ``n`` nodes.

    The physicists' rule (weight ``exp(-x^2)``) is rescaled: nodes by
    ``sqrt(2)`` and weights by ``1/sqrt(pi)``. The result integrates
    polynomials of degree up to ``2n - 1`` exactly against N(0, 1).

    Parameters
    ----------
    n : int
        Number of nodes, ``1 <= n <= 64``.

    Returns
    -------
    QuadratureRule
    """
    n = int(n)
    if not 1 <= n <= MAX_NODES:
        raise ConfigError(f"node count must lie in [1, {MAX_NODES}], got {n}")
    x, w = np.polynomial.hermite.hermgauss(n)
    x = math.sqrt(2.0) * x
    w = w / math.sqrt(math.pi)
    # exact antisymmetry; the root finder leaves ~1e-16 asymmetry
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
        raise NumericalError(f"Gauss-Hermite root finding failed for n={n}")
    return QuadratureRule(x, w)


@dataclass(frozen=True)
class GaussianSpec:
    """Mean and covariance of a multivariate normal law.

    The covariance is factored lazily. If the plain Cholesky factorization
    fails, ``1e-12 * trace(Sigma) / p`` is added to the diagonal once.
    """

    mean: np.ndarray
    cov: np.ndarray
    jittered: bool = field(default=False, init=False, compare=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float)).copy()
        p = mu.size
        if mu.ndim != 1 or cov.shape != (p, p):
            raise ConfigError(f"mean of size {p} does not match covariance {cov.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise NonFiniteError("Gaussian parameters must be finite")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ConfigError("covariance is not symmetric")
        mu.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def standard(cls, p: int) -> "GaussianSpec":
        return cls(np.zeros(p), np.eye(p))

    def factor(self) -> np.ndarray:
        """Lower-triangular ``T`` with ``T T^T = Sigma`` (possibly jittered)."""
        cached = self.__dict__.get("_factor")
        if cached is not None:
            return cached
        p = self.dim
        try:
            T = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            jitter = 1e-12 * float(np.trace(self.cov)) / p
            try:
                T = np.linalg.cholesky(self.cov + jitter * np.eye(p))
            except np.linalg.LinAlgError as exc:
                raise NumericalError("covariance is not positive semi-definite") from exc
            object.__setattr__(self, "jittered", True)
        T.setflags(write=False)
        self.__dict__["_factor"] = T
        return T


def _check_grid(n: int, p: int) -> int:
    size = n**p
    if size > GRID_GUARD:
        raise GridGuardError(f"grid of {n}^{p} = {size} points exceeds the guard {GRID_GUARD}")
    return size


def _grid_block(rule: QuadratureRule, p: int, start: int, stop: int):
    """Nodes and product weights for flat grid indices ``start:stop``."""
    n = rule.size
    idx = np.unravel_index(np.arange(start, stop), (n,) * p)
    Y = np.empty((stop - start, p))
    W = np.ones(stop - start)
    for j, ij in enumerate(idx):
        Y[:, j] = rule.nodes[ij]
        W *= rule.weights[ij]
    return Y, W


@lru_cache(maxsize=16)
def _cached_grid(n: int, p: int):
    Y, W = _grid_block(gh_rule(n), p, 0, n**p)
    Y.setflags(write=False)
    W.setflags(write=False)
    return Y, W


def tensor_grid(rule: QuadratureRule, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Full tensor-product grid in ``p`` dimensions.

    Returns
    -------
    nodes : ndarray, shape (N**p, p)
    weights : ndarray, shape (N**p,)
    """
    size = _check_grid(rule.size, p)
    return _grid_block(rule, p, 0, size)


def _as_columns(vals: np.ndarray, n: int) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 0:
        vals = np.full(n, float(vals))
    if vals.shape[0] != n:
        raise ConfigError(f"integrand returned {vals.shape[0]} rows for {n} points")
    return vals.reshape(n, -1)


def gaussian_expectation(
    f: Callable[[np.ndarray], np.ndarray],
    spec: GaussianSpec,
    rule: QuadratureRule | int = N_INT_DYNAMICS,
    chunk_size: int = 1 << 16,
) -> np.ndarray:
    """Tensor-product estimate of ``E[f(x)]`` for ``x ~ N(mu, Sigma)``.

    Parameters
    ----------
    f : callable
        Maps an ``(n, p)`` array of points to ``(n,)`` or ``(n, k)`` values.
    spec : GaussianSpec
    rule : QuadratureRule or int
        One-dimensional rule, or its node count.
    chunk_size : int
        Points evaluated per call of ``f``. Per-chunk partial sums are
        combined with ``math.fsum``, so the result does not depend on it
        beyond rounding in the chunk sums themselves.

    Returns
    -------
    ndarray, shape (k,)
    """
    if not isinstance(rule, QuadratureRule):
        rule = gh_rule(rule)
    p = spec.dim
    size = _check_grid(rule.size, p)
    T = spec.factor()
    cached = None
    if size <= CACHE_LIMIT and rule is gh_rule(rule.size):
        cached = _cached_grid(rule.size, p)
    partials = []
    for start in range(0, size, chunk_size):
        stop = min(size, start + chunk_size)
        if cached is not None:
            Y, W = cached[0][start:stop], cached[1][start:stop]
        else:
            Y, W = _grid_block(rule, p, start, stop)
        X = Y @ T.T + spec.mean
        F = _as_columns(f(X), stop - start)
        if not np.all(np.isfinite(F)):
            raise NonFiniteError("integrand is not finite at a quadrature node")
        partials.append(W @ F)
    partials = np.asarray(partials)
    return np.array([math.fsum(col) for col in partials.T])


def mc_expectation(
    f: Callable[[np.ndarray], np.ndarray],
    spec: GaussianSpec,
    n_samples: int,
    seed: int,
    chunk_size: int = 1 << 18,
) -> tuple[np.ndarray, np.ndarray]:
    """Plain Monte Carlo estimate of ``E[f(x)]`` with its standard error.

    Chunks are merged with the pairwise mean/variance update, so memory stays
    bounded for large ``n_samples``.
    """
    if n_samples < 2:
        raise ConfigError("n_samples must be at least 2")
    rng = np.random.default_rng(seed)
    T = spec.factor()
    count, mean, m2 = 0, None, None
    for start in range(0, n_samples, chunk_size):
        n = min(chunk_size, n_samples - start)
        X = rng.standard_normal((n, spec.dim)) @ T.T + spec.mean
        F = _as_columns(f(X), n)
        if not np.all(np.isfinite(F)):
            raise NonFiniteError("integrand is not finite at a Monte Carlo sample")
        mu_b = F.mean(axis=0)
        m2_b = ((F - mu_b) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n, mu_b, m2_b
            continue
        delta = mu_b - mean
        tot = count + n
        mean = mean + delta * (n / tot)
        m2 = m2 + m2_b + delta**2 * (count * n / tot)
        count = tot
    stderr = np.sqrt(m2 / (count - 1) / count)
    return mean, stderr
