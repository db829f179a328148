"""Population loss in sufficient-statistics space and the two-token phase map.

Local fields are jointly Gaussian: ``z* ~ N(0, I_L)`` and
``z = m z* + sqrt(1 - m^2) xi + C eps`` with ``xi ~ N(0, I_L)``, so the loss
``R(eps, m) = E||g(z*) - f(z)||^2`` is a ``2L``-dimensional Gaussian
integral evaluated by tensor-product Gauss-Hermite quadrature.

For the positional/semantic target with the two-token antipodal model the
loss is a quadratic polynomial in ``omega`` whose coefficients depend on
``(eps, m)`` only through five base quantities::

    R = (1-w)^2 E||S||^2 + 2w(1-w) <A, E S> + w^2 ||A||^2
        - 2(1-w) E<S, M> - 2w <A, E M> + E||M||^2

with ``S = softmax_rows(z* z*^T)``, ``M = softmax_rows(z z^T)`` and ``A`` the
positional block. These are tabulated once and reused for every ``(w, a)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from .errors import ConfigError, ConvergenceWarning
from .hermite import BEYOND_TRUNCATION, LinkFunction, hermite_table
from .models import (
    AttentionModel,
    NetworkModel,
    ReductionMap,
    attention_from_fields,
    layout_coeffs,
    positional_block,
    positional_semantic_link,
    softmax_rows,
)
from .quadrature import MAX_NODES, N_INT_DYNAMICS, N_INT_PHASE, GaussianSpec, gaussian_expectation, gh_rule

__all__ = [
    "PHASES",
    "BOUNDARY",
    "LossSurface",
    "PhaseLabel",
    "Minimum",
    "field_law",
    "population_loss",
    "loss_surface",
    "origin_gradient",
    "origin_hessian",
    "effective_sie_with_encoding",
    "find_minima",
    "classify_phase",
    "transition_omega",
    "phase_model",
]

PHASES = (
    "UniquePositional",
    "GlobalPositional",
    "GlobalSemanticPositionalDynamic",
    "UniqueSemanticMisaligned",
    "GlobalSemantic",
    "UniqueSemantic",
)
BOUNDARY = "Boundary"
TYPE_THRESHOLD = 0.95
# order multiplier for L-dimensional integrals, which are cheap to refine
SELF_REFINE = 3


def phase_model() -> AttentionModel:
    """Two-token attention with ``P_1 = -P_2`` and full-matrix output."""
    return AttentionModel(ReductionMap.full(), "antipodal")


def field_law(eps, m, C: np.ndarray) -> GaussianSpec:
    """Joint law of ``(z*, z)`` for frame coordinates ``eps`` and overlap ``m``.

    ``m`` may be a scalar or a per-token vector (untied weights).
    """
    L = C.shape[0]
    mv = np.broadcast_to(np.asarray(m, dtype=float), (L,))
    if np.any(np.abs(mv) > 1 + 1e-12):
        raise ConfigError("overlap must satisfy |m| <= 1")
    mean = np.concatenate([np.zeros(L), C @ eps if C.shape[1] else np.zeros(L)])
    cov = np.eye(2 * L)
    cov[np.arange(L), L + np.arange(L)] = mv
    cov[L + np.arange(L), np.arange(L)] = mv
    return GaussianSpec(mean, cov)


def _model_output(model, z: np.ndarray) -> np.ndarray:
    if isinstance(model, AttentionModel):
        c = None if model.injected is None else np.asarray(model.injected, dtype=float)
        return attention_from_fields(z, model.reduction, c)
    if isinstance(model, NetworkModel):
        u = z.sum(axis=1) / math.sqrt(z.shape[1])
        return np.asarray(model.activation(u))[:, None]
    raise ConfigError(f"unsupported model {type(model).__name__}")


def population_loss(e, m, target: LinkFunction, model, n_int: int = N_INT_DYNAMICS) -> float:
    """``R(e, m) = E||g(z*) - f(z)||^2`` by tensor-product quadrature.

    Hermite-sum targets use exact conditioning on the model fields, which
    leaves an ``L``-dimensional integral on a rule ``SELF_REFINE`` times
    finer. Other targets integrate ``||g - f||^2`` over the joint
    ``2L``-dimensional law of ``(z*, z)``, which keeps the loss exactly zero
    wherever the model reproduces the target.

    Parameters
    ----------
    e : float or array
        Frame coordinates ``eps`` of the positional layout (empty or zero
        without positional encoding).
    m : float or array
        Semantic overlap; a length-L vector for untied networks.
    """
    L = target.seq_len
    C = layout_coeffs(getattr(model, "layout", "none"), L)
    eps = np.atleast_1d(np.asarray(e, dtype=float)).ravel()
    if C.shape[1] == 0:
        if np.any(eps):
            raise ConfigError("this model has no positional encoding; e must be zero")
        eps = np.zeros(0)
    elif eps.size != C.shape[1]:
        raise ConfigError(f"expected {C.shape[1]} positional coordinates, got {eps.size}")
    if np.ndim(m) == 0 and float(m) ** 2 + eps @ eps > 1 + 1e-9:
        raise ConfigError("(e, m) must lie in the closed unit ball")
    if target.kind == "separable-hermite" and _max_degree(target) < n_int:
        return _conditional_loss(eps, m, target, model, C, n_int)
    spec = field_law(eps, m, C)

    def integrand(x):
        diff = target.evaluate(x[:, :L]) - _model_output(model, x[:, L:])
        return np.sum(diff * diff, axis=1)

    return float(gaussian_expectation(integrand, spec, gh_rule(n_int))[0])


def _fine_rule(n_int: int):
    return gh_rule(min(SELF_REFINE * n_int, MAX_NODES))


def _max_degree(target: LinkFunction) -> int:
    return max((max(n) for _, n in target.params["terms"]), default=0)


def _conditional_loss(eps, m, target: LinkFunction, model, C: np.ndarray, n_int: int) -> float:
    """Loss of a Hermite-sum target by conditioning on the model fields.

    Given ``z ~ N(mu, I)`` with ``mu = C eps``, Mehler's formula gives
    ``E[He_n(z*_i) | z] = m_i^n He_n(z_i - mu_i)``, so the cross term is an
    ``L``-dimensional integral whose dependence on ``m`` is an exact
    polynomial, and ``E g^2`` follows from Hermite orthogonality.
    """
    L = target.seq_len
    mv = np.broadcast_to(np.asarray(m, dtype=float), (L,))
    if np.any(np.abs(mv) > 1 + 1e-12):
        raise ConfigError("overlap must satisfy |m| <= 1")
    mu = C @ eps if C.shape[1] else np.zeros(L)
    merged: dict = {}
    for coef, n in target.params["terms"]:
        merged[n] = merged.get(n, 0.0) + coef
    g2 = sum(c * c * math.prod(math.factorial(k) for k in n) for n, c in merged.items())
    top = _max_degree(target)

    def integrand(z):
        f = _model_output(model, z)
        if f.shape[1] != 1:
            raise ConfigError("a scalar Hermite target needs a scalar model output")
        f = f[:, 0]
        H = hermite_table(top, z - mu)
        cond = np.zeros(z.shape[0])
        for n, c in merged.items():
            prod = np.full(z.shape[0], c * math.prod(mv[i] ** k for i, k in enumerate(n)))
            for i, k in enumerate(n):
                if k:
                    prod = prod * H[:, i, k]
            cond += prod
        return f * f - 2.0 * f * cond

    return g2 + float(gaussian_expectation(integrand, GaussianSpec(mu, np.eye(L)), _fine_rule(n_int))[0])


# --- positional/semantic base quantities ------------------------------------

@lru_cache(maxsize=4096)
def _ps_base(e: float, m: float, n_int: int) -> np.ndarray:
    """``[E<S,M>, E M (4), E||M||^2]`` at ``(e, m)`` for the antipodal model."""
    spec = field_law(np.array([e]), m, np.array([[1.0], [-1.0]]))

    def integrand(x):
        S = softmax_rows(x[:, :2, None] * x[:, None, :2])
        z = x[:, 2:]
        M = softmax_rows(z[:, :, None] * z[:, None, :])
        M = M.reshape(-1, 4)
        return np.column_stack([np.sum(S.reshape(-1, 4) * M, axis=1), M, np.sum(M * M, axis=1)])

    out = gaussian_expectation(integrand, spec, gh_rule(n_int))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def _ps_constants(n_int: int) -> tuple[float, np.ndarray]:
    """``E||S||^2`` and ``E S`` (flattened), independent of ``(e, m)``."""
    spec = GaussianSpec.standard(2)

    def integrand(x):
        S = softmax_rows(x[:, :, None] * x[:, None, :]).reshape(-1, 4)
        return np.column_stack([np.sum(S * S, axis=1), S])

    out = gaussian_expectation(integrand, spec, gh_rule(n_int))
    return float(out[0]), out[1:].copy()


def _ps_combine(base: np.ndarray, omega: float, a: float, n_int: int) -> np.ndarray:
    """Loss from base quantities; ``base`` may be ``(6,)`` or ``(n, 6)``."""
    ess, es = _ps_constants(n_int)
    A = positional_block(a).ravel()
    base = np.asarray(base)
    K, EM, EMM = base[..., 0], base[..., 1:5], base[..., 5]
    w = omega
    return (
        (1 - w) ** 2 * ess + 2 * w * (1 - w) * float(A @ es) + w * w * float(A @ A)
        - 2 * (1 - w) * K - 2 * w * (EM @ A) + EMM
    )


@lru_cache(maxsize=8)
def _ps_circle(n_int: int, n_theta: int) -> tuple[np.ndarray, np.ndarray]:
    thetas = -0.5 * math.pi + math.pi * np.arange(n_theta) / n_theta
    table = np.array([_ps_base(float(np.sin(t)), float(np.cos(t)), n_int) for t in thetas])
    thetas.setflags(write=False)
    table.setflags(write=False)
    return thetas, table


def _is_phase_setting(target: LinkFunction, model) -> bool:
    return (
        target.kind == "positional-semantic"
        and isinstance(model, AttentionModel)
        and model.layout == "antipodal"
        and model.reduction.kind == "full"
        and model.injected is None
    )


@dataclass(frozen=True)
class LossSurface:
    """Loss on the unit circle ``(e, m) = (sin t, cos t)`` for scalar ``e``.

    Because ``R(-x) = R(x)``, angles cover ``[-pi/2, pi/2)`` with period
    ``pi``. ``points`` holds ``(e, m)`` per angle and ``values`` the loss.
    """

    target: LinkFunction
    model: AttentionModel
    n_int: int
    thetas: np.ndarray
    values: np.ndarray
    points: np.ndarray = field(repr=False, default=None)

    def loss(self, e, m) -> float:
        """Loss at an arbitrary point of the ball."""
        if _is_phase_setting(self.target, self.model):
            p = self.target.params
            base = _ps_base(float(np.ravel(e)[0]), float(m), self.n_int)
            return float(_ps_combine(base, p["omega"], p["a"], self.n_int))
        return population_loss(e, m, self.target, self.model, self.n_int)

    def spline(self) -> CubicSpline:
        t = np.append(self.thetas, self.thetas[0] + math.pi)
        v = np.append(self.values, self.values[0])
        return CubicSpline(t, v, bc_type="periodic")


def loss_surface(target: LinkFunction, model=None, n_int: int = N_INT_PHASE, n_theta: int = 360) -> LossSurface:
    """Tabulate the loss on the unit circle of a one-coordinate layout."""
    model = phase_model() if model is None else model
    if layout_coeffs(model.layout, target.seq_len).shape[1] != 1:
        raise ConfigError("circle surfaces need a layout with a single positional coordinate")
    if _is_phase_setting(target, model):
        thetas, table = _ps_circle(n_int, n_theta)
        p = target.params
        values = _ps_combine(table, p["omega"], p["a"], n_int)
    else:
        thetas = -0.5 * math.pi + math.pi * np.arange(n_theta) / n_theta
        values = np.array([population_loss(np.sin(t), np.cos(t), target, model, n_int) for t in thetas])
    pts = np.column_stack([np.sin(thetas), np.cos(thetas)])
    return LossSurface(target, model, n_int, thetas, np.asarray(values, dtype=float), pts)


def _loss_fn(surface_or_pair):
    if isinstance(surface_or_pair, LossSurface):
        return surface_or_pair.loss, 2
    target, model, n_int = surface_or_pair
    q = layout_coeffs(model.layout, target.seq_len).shape[1]

    def f(e, m):
        return population_loss(np.full(q, e) if q else 0.0, m, target, model, n_int)

    return f, (2 if q else 1)


def origin_gradient(surface, h: float = 1e-2) -> np.ndarray:
    """Central-difference gradient ``(dR/de, dR/dm)`` at the origin.

    One Richardson step combines steps ``h`` and ``h/2``. ``surface`` is a
    ``LossSurface`` or a ``(target, model, n_int)`` triple; without
    positional encoding only ``dR/dm`` is returned.
    """
    f, dim = _loss_fn(surface)

    def d1(k):
        def D(s):
            if k == 0:
                return (f(s, 0.0) - f(-s, 0.0)) / (2 * s)
            return (f(0.0, s) - f(0.0, -s)) / (2 * s)
        return (4 * D(h / 2) - D(h)) / 3

    ks = (0, 1) if dim == 2 else (1,)
    return np.array([d1(k) for k in ks])


def origin_hessian(surface, h: float = 1e-2) -> np.ndarray:
    """Central-difference Hessian at the origin with one Richardson step.

    Ordered ``(e, m)``; ``1 x 1`` without positional encoding.
    """
    f, dim = _loss_fn(surface)
    r0 = f(0.0, 0.0)

    def hess(s):
        mm = (f(0.0, s) - 2 * r0 + f(0.0, -s)) / s**2
        if dim == 1:
            return np.array([[mm]])
        ee = (f(s, 0.0) - 2 * r0 + f(-s, 0.0)) / s**2
        em = (f(s, s) - f(s, -s) - f(-s, s) + f(-s, -s)) / (4 * s * s)
        return np.array([[ee, em], [em, mm]])

    H = (4 * hess(h / 2) - hess(h)) / 3
    return 0.5 * (H + H.T)


def effective_sie_with_encoding(
    target: LinkFunction,
    model: AttentionModel,
    max_order: int = 6,
    tol: float = 1e-6,
    n_int: int = N_INT_DYNAMICS,
    radius: float = 0.4,
    n_dirs: int = 8,
    n_nodes: int = 17,
):
    """Leading order of the Taylor expansion of ``R`` at the origin.

    Along each direction ``u`` of a half-circle grid on the ``(eps, m)``
    sphere (only ``m`` without positional encoding), ``t -> R(t u)`` is
    sampled at Chebyshev nodes on ``[-radius, radius]`` and fitted by a
    Chebyshev series. The Taylor coefficients of the fit estimate
    ``D^k R / k!``; the result is the smallest ``k >= 1`` whose coefficient
    exceeds ``tol`` in some direction.
    """
    q = layout_coeffs(model.layout, target.seq_len).shape[1]
    if q == 0:
        dirs = [(np.zeros(0), 1.0)]
    else:
        dirs = []
        for t in np.pi * np.arange(n_dirs) / n_dirs:
            dirs.append((np.full(q, np.sin(t) / math.sqrt(q)), float(np.cos(t))))
    nodes = np.cos(np.pi * (np.arange(n_nodes) + 0.5) / n_nodes)
    cheb = np.polynomial.chebyshev
    best = np.zeros(max_order + 1)
    for ue, um in dirs:
        vals = np.array([population_loss(s * radius * ue, s * radius * um, target, model, n_int) for s in nodes])
        series = cheb.Chebyshev(cheb.chebfit(nodes, vals, n_nodes - 1))
        power = series.convert(kind=np.polynomial.Polynomial).coef
        k = np.arange(power.size)
        taylor = power / radius**k
        n = min(max_order + 1, taylor.size)
        best[:n] = np.maximum(best[:n], np.abs(taylor[:n]))
    for k in range(1, max_order + 1):
        if best[k] > tol:
            return k
    return BEYOND_TRUNCATION


@dataclass(frozen=True)
class Minimum:
    theta: float
    e: float
    m: float
    loss: float
    kind: str


def _kind(e: float, m: float) -> str:
    if abs(m) > TYPE_THRESHOLD:
        return "semantic"
    if abs(e) > TYPE_THRESHOLD:
        return "positional"
    return "mixed"


def find_minima(surface: LossSurface, n_starts: int | None = None, ang_tol: float = 1e-3) -> list[Minimum]:
    """Local minima of ``R`` on the unit circle.

    Grid minima of the tabulated surface seed golden-section searches on a
    periodic cubic spline. Angles are taken modulo ``pi`` since
    ``R(-x) = R(x)``. Minima closer than ``ang_tol`` are merged.
    """
    th, v = surface.thetas, surface.values
    n = th.size
    if n_starts is not None and n_starts != n:
        surface = loss_surface(surface.target, surface.model, surface.n_int, n_starts)
        th, v, n = surface.thetas, surface.values, surface.thetas.size
    sp = surface.spline()
    step = math.pi / n
    found: list[Minimum] = []
    for i in range(n):
        if not (v[i] < v[i - 1] and v[i] <= v[(i + 1) % n]):
            continue
        try:
            res = minimize_scalar(sp, bracket=(th[i] - step, th[i], th[i] + step), method="golden", tol=1e-10)
            t = float(res.x)
        except ValueError:
            warnings.warn(f"golden-section refinement failed near theta={th[i]:.4f}", ConvergenceWarning, stacklevel=2)
            t = float(th[i])
        t = (t + 0.5 * math.pi) % math.pi - 0.5 * math.pi
        if any(min(abs(t - f.theta), math.pi - abs(t - f.theta)) < ang_tol for f in found):
            continue
        e, m = math.sin(t), math.cos(t)
        found.append(Minimum(t, e, m, float(sp(t)), _kind(e, m)))
    return sorted(found, key=lambda f: f.loss)


@dataclass(frozen=True)
class PhaseLabel:
    """Phase of one ``(omega, a)`` cell with its supporting evidence."""

    label: str
    omega: float
    a: float
    minima: tuple
    hessian: np.ndarray
    eigenvalues: np.ndarray
    steepest: str
    global_kind: str

    @property
    def boundary(self) -> bool:
        return self.label == BOUNDARY


def _steepest(H: np.ndarray) -> tuple[str, np.ndarray, bool]:
    vals, vecs = np.linalg.eigh(H)
    v = vecs[:, 0]
    degenerate = abs(vals[1] - vals[0]) < 1e-8
    return ("semantic" if abs(v[1]) > abs(v[0]) else "positional"), vals, degenerate


def classify_phase(omega: float, a: float, n_int: int = N_INT_PHASE, n_theta: int = 360) -> PhaseLabel:
    """Phase label of the two-token positional/semantic problem.

    The label combines the minima census on the unit circle, the type of
    the global minimum, and the predicted SGD basin, which is the dominant
    coordinate of the origin Hessian's lowest eigenvector.
    """
    if not (0 <= omega <= 1 and 0 <= a <= 1):
        raise ConfigError("(omega, a) must lie in [0, 1]^2")
    surface = loss_surface(positional_semantic_link(omega, a), phase_model(), n_int, n_theta)
    minima = find_minima(surface)
    H = origin_hessian(surface)
    steep, vals, degenerate = _steepest(H)
    kinds = {mn.kind for mn in minima}
    has_sem, has_pos = "semantic" in kinds, "positional" in kinds
    glob = minima[0].kind if minima else "none"
    if degenerate:
        label = BOUNDARY
    elif has_pos and not has_sem:
        label = "UniquePositional"
    elif has_sem and not has_pos:
        label = "UniqueSemantic" if steep == "semantic" else "UniqueSemanticMisaligned"
    elif has_sem and has_pos:
        if steep == "positional":
            label = "GlobalPositional" if glob == "positional" else "GlobalSemanticPositionalDynamic"
        else:
            label = "GlobalSemantic" if glob == "semantic" else BOUNDARY
    else:
        label = BOUNDARY
    return PhaseLabel(label, float(omega), float(a), tuple(minima), H, vals, steep, glob)


def _steepest_gap(omega: float, a: float, n_int: int) -> float:
    """``H_mm - H_ee`` at the origin (negative when the semantic axis is steeper)."""
    surface = LossSurface(positional_semantic_link(omega, a), phase_model(), n_int, np.zeros(0), np.zeros(0))
    H = origin_hessian(surface)
    return float(H[1, 1] - H[0, 0])


def transition_omega(a: float, n_int: int = N_INT_PHASE, tol: float = 1e-5) -> float:
    """Bisect ``omega`` for the switch of the origin's steepest direction."""
    lo, hi = 0.0, 1.0
    glo, ghi = _steepest_gap(lo, a, n_int), _steepest_gap(hi, a, n_int)
    if glo * ghi > 0:
        raise ConfigError(f"no steepest-direction switch for a={a}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        gm = _steepest_gap(mid, a, n_int)
        if gm * glo > 0:
            lo, glo = mid, gm
        else:
            hi = mid
    return 0.5 * (lo + hi)
