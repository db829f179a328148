"""Deterministic dynamics of the sufficient statistics.

Time is ``t = lr * step / d``. For weights on the sphere, the overlaps
``x = (eps, m)`` follow projected gradient flow on the population loss,

    dx/dt = -grad R(x) + (x . grad R(x)) x - (lr / 2) G(x) x,

where the last term is the second-order correction from renormalizing after
each noisy step and ``G = E||grad_w^perp loss||^2`` (per-sample gradient
in ``w``, which equals the unit-sphere quantity divided by ``d``).

Hermite-series drifts use the exact correlation of a network output with
the target. For the tied network ``u = sum_i z_i / sqrt(L)`` has
``Cov(u, z*_i) = m / sqrt(L)``, so ``E[sigma(u) g(z*)]`` has the series
``sum_k k! c_k(sigma) L^{-k/2} (C_k x (1, ..., 1)) m^k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, NumericalError
from .hermite import HermiteTensor, LinkFunction, contract_partial
from .models import AttentionModel, NetworkModel, attention_from_fields, layout_coeffs, softmax_rows

__all__ = [
    "FlowSpec",
    "FlowResult",
    "GammaCorrection",
    "tied_series",
    "untied_series",
    "drift_tied",
    "drift_untied",
    "grad_norm_term",
    "integrate_flow",
    "tied_flow",
    "untied_flow",
    "landscape_flow",
]


def tied_series(sigma_coeffs, contractions, L: int) -> np.ndarray:
    """Effective coefficients ``a_k = k! c_k L^{-k/2} (C_k x 1)``."""
    c = np.asarray(sigma_coeffs, dtype=float)
    C1 = np.asarray(contractions, dtype=float)
    K = min(c.size, C1.size) - 1
    k = np.arange(K + 1)
    fact = np.array([math.factorial(int(j)) for j in k], dtype=float)
    return fact * c[: K + 1] * float(L) ** (-k / 2.0) * C1[: K + 1]


def untied_series(sigma_coeffs, L: int, k_max: int) -> np.ndarray:
    """Effective per-order weights ``b_k = k! c_k L^{-k/2}``."""
    c = np.zeros(k_max + 1)
    sc = np.asarray(sigma_coeffs, dtype=float)
    n = min(sc.size, k_max + 1)
    c[:n] = sc[:n]
    k = np.arange(k_max + 1)
    fact = np.array([math.factorial(int(j)) for j in k], dtype=float)
    return fact * c * float(L) ** (-k / 2.0)


def drift_tied(m: float, sigma_coeffs, contractions, k_max: int | None = None, L: int | None = None) -> float:
    """``phi(m) = 2 (1 - m^2) sum_k k a_k m^{k-1}``.

    Parameters
    ----------
    m : float
    sigma_coeffs : sequence
        ``c_k(sigma)`` for ``k = 0..K``.
    contractions : sequence
        ``C_k(g) x (1, ..., 1)`` for ``k = 0..K``.
    k_max : int, optional
        Truncation order (default: all given terms).
    L : int, optional
        Sequence length. When given, ``a_k = k! c_k L^{-k/2} (C_k x 1)``,
        the exact normalization for the network ``sigma(sum_i z_i/sqrt(L))``.
        When omitted, ``a_k = c_k (C_k x 1)`` is used as supplied.
    """
    if abs(m) > 1 + 1e-12:
        raise ConfigError("drift needs |m| <= 1")
    if L is None:
        c = np.asarray(sigma_coeffs, dtype=float)
        C1 = np.asarray(contractions, dtype=float)
        n = min(c.size, C1.size)
        a = c[:n] * C1[:n]
    else:
        a = tied_series(sigma_coeffs, contractions, L)
    if k_max is not None:
        a = a[: k_max + 1]
    k = np.arange(a.size)
    s = float(np.sum(k[1:] * a[1:] * m ** (k[1:] - 1)))
    return 2.0 * (1.0 - m * m) * s


def drift_untied(
    mvec, sigma_coeffs, tensors: Sequence[HermiteTensor], k_max: int | None = None, exact: bool = True
) -> np.ndarray:
    """``phi_i = 2 (1 - m_i^2) sum_k k b_k [C_k x (I, m, ..., m)]_i``.

    With ``exact`` the weights are ``b_k = k! c_k L^{-k/2}``; otherwise
    ``b_k = c_k`` as supplied. ``tensors[k]`` is ``C_k`` (index 0 unused).
    Odeco tensors contract per eigen-direction.
    """
    m = np.asarray(mvec, dtype=float)
    if np.any(np.abs(m) > 1 + 1e-12):
        raise ConfigError("drift needs |m_i| <= 1")
    L = m.size
    K = len(tensors) - 1 if k_max is None else min(k_max, len(tensors) - 1)
    if exact:
        b = untied_series(sigma_coeffs, L, K)
    else:
        b = np.zeros(K + 1)
        sc = np.asarray(sigma_coeffs, dtype=float)
        b[: min(sc.size, K + 1)] = sc[: K + 1]
    s = np.zeros(L)
    for k in range(1, K + 1):
        if b[k] != 0.0:
            s += k * b[k] * contract_partial(tensors[k], m)
    return 2.0 * (1.0 - m * m) * s


# --- gradient-norm term -----------------------------------------------------

def _local_grad(model, target: LinkFunction, zs, z):
    """Per-sample ``b_i = d loss / d z_i`` for a batch of fields."""
    L = zs.shape[1]
    y = target.evaluate(zs)
    if isinstance(model, AttentionModel):
        S = z[:, :, None] * z[:, None, :]
        if model.injected is not None:
            c = np.asarray(model.injected, dtype=float)
            S = S + np.outer(c, c)
        A = softmax_rows(S)
        f = model.reduction.apply(A)
        dA = model.reduction.adjoint(2.0 * (f - y), L)
        dS = A * (dA - np.sum(dA * A, axis=2, keepdims=True))
        return np.einsum("nij,nj->ni", dS + dS.transpose(0, 2, 1), z)
    u = z.sum(axis=1) / math.sqrt(L)
    sig = model.activation
    coef = 2.0 * (np.asarray(sig(u)) - y[:, 0]) * np.asarray(sig.deriv(u)) / math.sqrt(L)
    return np.repeat(coef[:, None], L, axis=1)


def grad_norm_term(point, model, target: LinkFunction, d: int, n_mc: int = 20000, seed: int = 0) -> float:
    """Monte Carlo estimate of ``E||grad^perp loss||^2`` on the unit sphere.

    The gradient is taken with respect to ``w/sqrt(d)`` and projected
    orthogonally to it, so the estimate grows linearly in ``d``.

    Parameters
    ----------
    point : tuple
        ``(eps, m)`` for tied weights, or the overlap vector for untied ones.
    """
    rng = np.random.default_rng(seed)
    L = target.seq_len
    if isinstance(model, NetworkModel) and not model.tied:
        m = np.asarray(point, dtype=float)
        r = np.sqrt(np.clip(1 - m * m, 0, None))
        zs = rng.standard_normal((n_mc, L))
        xi = rng.standard_normal((n_mc, L))
        chi = rng.chisquare(d - 2, size=(n_mc, L))
        z = m * zs + r * xi
        b = _local_grad(model, target, zs, z)
        tang = zs**2 + xi**2 - (m * zs + r * xi) ** 2
        vals = np.sum(b**2 * (tang + chi), axis=1)
    else:
        eps, m = point
        C = layout_coeffs(model.layout, L)
        q = C.shape[1]
        eps = np.atleast_1d(np.asarray(eps, dtype=float)).reshape(q)
        m = float(m)
        r = math.sqrt(max(0.0, 1.0 - m * m - float(eps @ eps)))
        zs = rng.standard_normal((n_mc, L))
        xi = rng.standard_normal((n_mc, L))
        zeta = rng.standard_normal((n_mc, L, q))
        chi = rng.chisquare(d - q - 2, size=n_mc)
        z = m * zs + r * xi + np.einsum("nij,j->ni", zeta + C, eps)
        b = _local_grad(model, target, zs, z)
        gm = np.sum(b * zs, axis=1)
        ge = np.einsum("ni,nij->nj", b, zeta + C)
        gu = np.sum(b * xi, axis=1)
        radial = m * gm + ge @ eps + r * gu
        vals = gm**2 + np.sum(ge**2, axis=1) + gu**2 - radial**2 + np.sum(b**2, axis=1) * chi
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("non-finite gradient sample")
    return float(np.mean(vals))


# --- integration ------------------------------------------------------------

@dataclass(frozen=True)
class GammaCorrection:
    """Second-order term ``-coef * lr * G(x) * x``.

    ``grad_norm`` is either a constant or a callable of the state giving
    ``E||grad_w^perp loss||^2`` (unit-sphere value divided by ``d``).
    """

    lr: float
    grad_norm: float | Callable[[np.ndarray], float]
    coef: float = 0.5

    def __call__(self, x: np.ndarray) -> np.ndarray:
        G = self.grad_norm(x) if callable(self.grad_norm) else self.grad_norm
        return -self.coef * self.lr * G * x


@dataclass(frozen=True)
class FlowSpec:
    """Ordinary differential equation on the overlaps.

    Parameters
    ----------
    drift : callable
        Deterministic velocity ``x -> dx/dt``.
    x0 : array
    dt, horizon : float
    eta : float
        Hitting threshold on ``norm(x)``.
    norm : callable, optional
        Hitting norm; Euclidean by default.
    correction : GammaCorrection, optional
    per_coordinate : bool
        Clip each coordinate to ``[-1, 1]`` (untied rows) instead of the
        whole state to the unit ball.
    """

    drift: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    dt: float = 1e-3
    horizon: float = 100.0
    eta: float = 0.3
    norm: Callable[[np.ndarray], float] | None = None
    correction: GammaCorrection | None = None
    per_coordinate: bool = False
    record_every: int = 1

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float)).copy()
        if not self.dt > 0 or not self.horizon > 0:
            raise ConfigError("dt and horizon must be positive")
        bound = np.max(np.abs(x0)) if self.per_coordinate else np.linalg.norm(x0)
        if bound > 1 + 1e-12:
            raise ConfigError("initial point must lie in the closed unit ball")
        object.__setattr__(self, "x0", x0)

    def velocity(self, x: np.ndarray) -> np.ndarray:
        v = np.asarray(self.drift(x), dtype=float)
        if self.correction is not None:
            v = v + self.correction(x)
        return v


@dataclass(frozen=True)
class FlowResult:
    times: np.ndarray
    path: np.ndarray
    hitting_time: float | None
    clip_events: tuple = field(default=())


def integrate_flow(spec: FlowSpec) -> FlowResult:
    """Classical RK4 with fixed step until the threshold or the horizon.

    The hitting time is interpolated linearly inside the crossing step.
    States leaving the unit ball are projected back and the time is logged
    in ``clip_events``.
    """
    norm = spec.norm or (lambda x: float(np.linalg.norm(x)))
    x = spec.x0.copy()
    h = spec.dt
    n_steps = int(math.ceil(spec.horizon / h - 1e-9))
    times, path, clips = [0.0], [x.copy()], []
    hit = 0.0 if norm(x) >= spec.eta else None
    t = 0.0
    for i in range(n_steps):
        if hit is not None:
            break
        try:
            k1 = spec.velocity(x)
            k2 = spec.velocity(x + 0.5 * h * k1)
            k3 = spec.velocity(x + 0.5 * h * k2)
            k4 = spec.velocity(x + h * k3)
        except (ArithmeticError, ValueError) as exc:
            raise NumericalError(f"drift evaluation failed at t={t:.6g}") from exc
        xn = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(xn)):
            raise NumericalError(f"non-finite state at t={t + h:.6g}")
        if spec.per_coordinate:
            if np.any(np.abs(xn) > 1):
                clips.append(t + h)
                xn = np.clip(xn, -1.0, 1.0)
        else:
            r = np.linalg.norm(xn)
            if r > 1:
                clips.append(t + h)
                xn = xn / r
        n0, n1 = norm(x), norm(xn)
        if n1 >= spec.eta:
            frac = (spec.eta - n0) / (n1 - n0) if n1 != n0 else 1.0
            hit = t + frac * h
        x = xn
        t = (i + 1) * h
        if (i + 1) % spec.record_every == 0 or hit is not None:
            times.append(t)
            path.append(x.copy())
    return FlowResult(np.asarray(times), np.asarray(path), hit, tuple(clips))


def tied_flow(sigma_coeffs, contractions, L: int, m0: float, **kw) -> FlowSpec:
    """Flow of the tied network overlap driven by ``drift_tied``."""
    def drift(x):
        return np.array([drift_tied(float(x[0]), sigma_coeffs, contractions, L=L)])

    return FlowSpec(drift, np.array([m0]), **kw)


def untied_flow(sigma_coeffs, tensors: Sequence[HermiteTensor], m0, **kw) -> FlowSpec:
    """Flow of the untied overlaps; hits when ``||m|| / sqrt(L) >= eta``."""
    m0 = np.asarray(m0, dtype=float)
    L = m0.size

    def drift(x):
        return drift_untied(np.clip(x, -1, 1), sigma_coeffs, tensors)

    kw.setdefault("norm", lambda x: float(np.linalg.norm(x)) / math.sqrt(L))
    return FlowSpec(drift, m0, per_coordinate=True, **kw)


def landscape_flow(loss: Callable[[np.ndarray], float], x0, h: float = 1e-4, **kw) -> FlowSpec:
    """Projected gradient flow of a loss given on the ``(eps, m)`` ball.

    The gradient is taken by central differences of ``loss``.
    """
    x0 = np.asarray(x0, dtype=float)

    def drift(x):
        g = np.empty_like(x)
        for j in range(x.size):
            ej = np.zeros_like(x)
            ej[j] = h
            g[j] = (loss(x + ej) - loss(x - ej)) / (2 * h)
        return -g + float(x @ g) * x

    return FlowSpec(drift, x0, **kw)
