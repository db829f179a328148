"""Probabilists' Hermite polynomials, Hermite tensors and link functions.

The k-th Hermite coefficient of a link ``g: R^L -> R`` is the symmetric
tensor

    C_k[i_1, ..., i_k] = E[g(z) * prod_l He_{n_l}(z_l)] / k!,

where ``n_l`` counts how often ``l`` appears among ``(i_1, ..., i_k)`` and
``z ~ N(0, I_L)``. With this normalization ``g = sum_k <C_k, H_k>`` and
``E[g^2] = sum_k k! * ||C_k||_F^2``.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ConvergenceWarning, GridGuardError, NonFiniteError
from .quadrature import gh_rule, tensor_grid

__all__ = [
    "BEYOND_TRUNCATION",
    "HermiteTensor",
    "HermiteExpansion",
    "LinkFunction",
    "hermite_poly",
    "hermite_table",
    "hermite_coeffs_1d",
    "hermite_expansion",
    "hermite_tensor_coeff",
    "separable_expansion",
    "sequence_information_exponent",
    "contract_all_ones",
    "contract",
    "contract_partial",
    "operator_norm",
    "hermite_sum_link",
    "hermite_sum_expansion",
    "custom_link",
]

BEYOND_TRUNCATION = "beyond-truncation"
TENSOR_GUARD = 10**9


def hermite_poly(k: int, x):
    """Probabilists' Hermite polynomial ``He_k`` evaluated at ``x``.

    Uses ``He_{j+1} = x He_j - j He_{j-1}``. Scalars in, scalar out.
    """
    if k < 0:
        raise ConfigError("Hermite order must be non-negative")
    x = np.asarray(x, dtype=float)
    prev, cur = np.ones_like(x), x.copy()
    if k == 0:
        out = prev
    else:
        for j in range(1, k):
            prev, cur = cur, x * cur - j * prev
        out = cur
    return float(out) if out.ndim == 0 else out


def hermite_table(k_max: int, x) -> np.ndarray:
    """Stack ``He_0(x), ..., He_{k_max}(x)`` along a new last axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (k_max + 1,))
    out[..., 0] = 1.0
    if k_max >= 1:
        out[..., 1] = x
    for j in range(1, k_max):
        out[..., j + 1] = x * out[..., j] - j * out[..., j - 1]
    return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class HermiteTensor:
    """Order-``k`` symmetric tensor over ``R^L``, dense or odeco.

    Exactly one representation is stored. Dense tensors keep all ``L**k``
    entries. Odeco tensors keep ``eigenvalues`` (r,) and unit, mutually
    orthogonal ``vectors`` (r, L), meaning ``sum_i lam_i v_i^{(x)k}``.
    """

    order: int
    dim: int
    dense: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    vectors: np.ndarray | None = None

    def __post_init__(self):
        k, L = int(self.order), int(self.dim)
        if k < 0 or L < 1:
            raise ConfigError("order must be >= 0 and dim >= 1")
        object.__setattr__(self, "order", k)
        object.__setattr__(self, "dim", L)
        if (self.dense is None) == (self.eigenvalues is None):
            raise ConfigError("provide exactly one of dense or (eigenvalues, vectors)")
        if self.dense is not None:
            a = _readonly(self.dense)
            if a.shape != (L,) * k:
                raise ConfigError(f"dense tensor shape {a.shape} is not {(L,) * k}")
            if not np.all(np.isfinite(a)):
                raise NonFiniteError("tensor entries must be finite")
            scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
            for perm in itertools.permutations(range(k)):
                if np.max(np.abs(a - a.transpose(perm)), initial=0.0) > 1e-12 * scale:
                    raise ConfigError("dense tensor is not symmetric")
            object.__setattr__(self, "dense", a)
        else:
            lam = _readonly(np.atleast_1d(self.eigenvalues))
            V = _readonly(np.atleast_2d(self.vectors))
            if V.shape != (lam.size, L):
                raise ConfigError(f"vectors shape {V.shape} does not match ({lam.size}, {L})")
            gram = V @ V.T
            if np.max(np.abs(gram - np.eye(lam.size)), initial=0.0) > 1e-10:
                raise ConfigError("odeco vectors must be orthonormal")
            object.__setattr__(self, "eigenvalues", lam)
            object.__setattr__(self, "vectors", V)

    @classmethod
    def zeros(cls, order: int, dim: int) -> "HermiteTensor":
        return cls(order, dim, dense=np.zeros((dim,) * order))

    @classmethod
    def from_odeco(cls, order: int, eigenvalues, vectors) -> "HermiteTensor":
        V = np.atleast_2d(np.asarray(vectors, dtype=float))
        return cls(order, V.shape[1], eigenvalues=eigenvalues, vectors=V)

    @property
    def is_odeco(self) -> bool:
        return self.dense is None

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        out = np.zeros((self.dim,) * self.order)
        for lam, v in zip(self.eigenvalues, self.vectors):
            t = np.array(lam)
            for _ in range(self.order):
                t = np.multiply.outer(t, v)
            out += t
        return out

    def max_abs(self) -> float:
        a = self.to_dense()
        return float(np.max(np.abs(a))) if a.size else 0.0

    def frobenius_sq(self) -> float:
        if self.is_odeco and self.order >= 1:
            return float(np.sum(self.eigenvalues**2))
        return float(np.sum(self.to_dense() ** 2))


@dataclass(frozen=True)
class HermiteExpansion:
    """Hermite coefficients ``C_0, ..., C_K`` of a scalar link.

    ``residual_norm`` estimates ``E[g^2] - sum_k k! ||C_k||^2``, the mass
    left beyond the truncation order.
    """

    coefficients: dict
    residual_norm: float = 0.0
    second_moment: float = float("nan")

    def __post_init__(self):
        orders = sorted(self.coefficients)
        if not orders or orders != list(range(len(orders))):
            raise ConfigError("coefficients must cover orders 0..K_max")
        dims = {c.dim for c in self.coefficients.values()}
        if len(dims) != 1:
            raise ConfigError("all coefficient tensors must share dim L")
        object.__setattr__(self, "coefficients", dict(self.coefficients))

    @property
    def k_max(self) -> int:
        return max(self.coefficients)

    @property
    def dim(self) -> int:
        return self.coefficients[0].dim

    def __getitem__(self, k: int) -> HermiteTensor:
        return self.coefficients[k]

    def inner(self, other: "HermiteExpansion") -> float:
        """``E[f g]`` reconstructed from the common truncation."""
        kk = min(self.k_max, other.k_max)
        return math.fsum(
            math.factorial(k) * float(np.sum(self[k].to_dense() * other[k].to_dense()))
            for k in range(kk + 1)
        )


@dataclass(frozen=True)
class LinkFunction:
    """Target map ``g: R^L -> R^k`` applied row-wise to local fields.

    Parameters
    ----------
    seq_len, out_dim : int
    evaluator : callable
        Maps ``(n, L)`` arrays to ``(n,)`` (scalar links) or ``(n, k)``.
    kind : str
        One of ``separable-hermite``, ``softmax-attention-target``,
        ``positional-semantic``, ``custom``.
    params : dict
        Kind-specific data, e.g. the Hermite terms for ``separable-hermite``.
    """

    seq_len: int
    out_dim: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    name: str = "custom"

    KINDS = ("separable-hermite", "softmax-attention-target", "positional-semantic", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown link kind {self.kind!r}")
        if self.seq_len < 1 or self.out_dim < 1:
            raise ConfigError("seq_len and out_dim must be positive")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.evaluator(np.asarray(z, dtype=float))

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        """Values as an ``(n, out_dim)`` array for ``z`` of shape ``(n, L)``."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[-1] != self.seq_len:
            raise ConfigError(f"link expects {self.seq_len} fields, got {z.shape[-1]}")
        return np.asarray(self.evaluator(z), dtype=float).reshape(z.shape[0], self.out_dim)

    def second_moment(self, n_quad: int = 12, n_mc: int = 200_000, seed: int = 0) -> float:
        """Estimate ``E[||g(z)||^2]``; tensor quadrature when ``L <= 4``."""
        L = self.seq_len
        if L <= 4:
            Z, W = tensor_grid(gh_rule(n_quad), L)
            vals = np.sum(self.evaluate(Z) ** 2, axis=1)
        else:
            Z = np.random.default_rng(seed).standard_normal((n_mc, L))
            vals = np.sum(self.evaluate(Z) ** 2, axis=1)
            W = np.full(n_mc, 1.0 / n_mc)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError("link is not finite on the quadrature grid")
        return float(math.fsum(W * vals))


def hermite_coeffs_1d(
    f: Callable[[np.ndarray], np.ndarray],
    k_max: int,
    n_quad: int = 64,
    kinks: Sequence[float] | None = None,
) -> np.ndarray:
    """Coefficients ``c_k = E[f(Z) He_k(Z)] / k!`` for ``k = 0..k_max``.

    Parameters
    ----------
    f : callable
        Vectorized scalar function.
    k_max : int
    n_quad : int
        Gauss-Hermite node count, at least ``k_max + 1``.
    kinks : sequence of float, optional
        Points where ``f`` is not smooth. Gauss-Hermite converges only
        algebraically across a kink, so when given, each smooth piece is
        integrated separately by adaptive quadrature instead.

    Returns
    -------
    ndarray, shape (k_max + 1,)
    """
    if n_quad < k_max + 1:
        raise ConfigError("n_quad must be at least k_max + 1")
    if not kinks:
        rule = gh_rule(n_quad)
        vals = np.asarray(f(rule.nodes), dtype=float)
        if vals.shape != rule.nodes.shape or not np.all(np.isfinite(vals)):
            raise NonFiniteError("f is not finite at a quadrature node")
        H = hermite_table(k_max, rule.nodes)
        wv = rule.weights * vals
        raw = np.array([math.fsum(wv * H[:, k]) for k in range(k_max + 1)])
    else:
        from scipy.integrate import quad

        edges = [-np.inf, *sorted(float(x) for x in kinks), np.inf]
        norm = 1.0 / math.sqrt(2.0 * math.pi)
        raw = np.zeros(k_max + 1)
        for k in range(k_max + 1):
            def integrand(x, k=k):
                v = float(np.asarray(f(np.array([x])), dtype=float).ravel()[0])
                if not math.isfinite(v):
                    raise NonFiniteError(f"f is not finite at x={x}")
                return v * hermite_poly(k, x) * math.exp(-0.5 * x * x) * norm

            raw[k] = math.fsum(
                quad(integrand, a, b, epsabs=1e-12, epsrel=1e-12, limit=400)[0]
                for a, b in zip(edges[:-1], edges[1:])
            )
    return raw / np.array([math.factorial(k) for k in range(k_max + 1)], dtype=float)


def _compositions(k: int, L: int):
    """All ``n in N^L`` with ``sum(n) == k``."""
    for cut in itertools.combinations(range(k + L - 1), L - 1):
        prev, parts = -1, []
        for c in cut:
            parts.append(c - prev - 1)
            prev = c
        parts.append(k + L - 2 - prev)
        yield tuple(parts)


def _fill_symmetric(k: int, L: int, by_counts: dict) -> np.ndarray:
    """Dense tensor whose entry depends only on the index multiplicities."""
    if k == 0:
        return np.array(by_counts[(0,) * L])
    idx = np.indices((L,) * k).reshape(k, -1).T
    counts = np.zeros((idx.shape[0], L), dtype=np.int64)
    for j in range(k):
        counts[np.arange(idx.shape[0]), idx[:, j]] += 1
    radix = (k + 1) ** np.arange(L)
    codes = counts @ radix
    lut = {int(np.dot(n, radix)): v for n, v in by_counts.items()}
    flat = np.array([lut[int(c)] for c in codes])
    return flat.reshape((L,) * k)


def hermite_expansion(g: LinkFunction, k_max: int, n_quad: int = 20) -> HermiteExpansion:
    """Dense Hermite coefficients of a scalar link by tensor quadrature.

    One evaluation of ``g`` on the ``n_quad**L`` grid is shared by all
    orders. Intended for ``L <= 4`` and ``k_max <= 4``.
    """
    if g.out_dim != 1:
        raise ConfigError("Hermite expansion needs a scalar link (k = 1)")
    L = g.seq_len
    cost = max(L**k_max, 1) * n_quad**L
    if cost > TENSOR_GUARD:
        raise GridGuardError(f"L^k * N^L = {cost} exceeds {TENSOR_GUARD}; use separable_expansion")
    rule = gh_rule(n_quad)
    Z, W = tensor_grid(rule, L)
    vals = g.evaluate(Z)[:, 0]
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError("link is not finite on the quadrature grid")
    H = hermite_table(k_max, Z)  # (n, L, k_max + 1)
    wv = W * vals
    coeffs = {}
    total = 0.0
    for k in range(k_max + 1):
        by_counts = {}
        for n in _compositions(k, L):
            prod = np.ones_like(wv)
            for l, nl in enumerate(n):
                if nl:
                    prod = prod * H[:, l, nl]
            by_counts[n] = math.fsum(wv * prod) / math.factorial(k)
        C = HermiteTensor(k, L, dense=_fill_symmetric(k, L, by_counts))
        coeffs[k] = C
        total += math.factorial(k) * C.frobenius_sq()
    m2 = math.fsum(W * vals**2)
    return HermiteExpansion(coeffs, residual_norm=m2 - total, second_moment=m2)


def hermite_tensor_coeff(g: LinkFunction, k: int, n_quad: int = 20) -> HermiteTensor:
    """Dense ``C_k(g)`` by tensor-product Gauss-Hermite quadrature."""
    return hermite_expansion(g, k, n_quad)[k]


def separable_expansion(
    parts: Sequence[Callable[[np.ndarray], np.ndarray]],
    k_max: int,
    n_quad: int = 64,
    kinks: Sequence[float] | None = None,
) -> HermiteExpansion:
    """Odeco expansion of ``g(z) = sum_i g_i(z_i)``.

    Every coefficient is ``C_k = sum_i c_k(g_i) e_i^{(x)k}`` for ``k >= 1``;
    the order-0 term is the scalar ``sum_i c_0(g_i)``.
    """
    L = len(parts)
    if L == 0:
        raise ConfigError("need at least one part")
    lam = np.array([hermite_coeffs_1d(gi, k_max, max(n_quad, k_max + 1), kinks) for gi in parts])
    eye = np.eye(L)
    coeffs = {0: HermiteTensor(0, L, dense=np.array(lam[:, 0].sum()))}
    for k in range(1, k_max + 1):
        coeffs[k] = HermiteTensor(k, L, eigenvalues=lam[:, k], vectors=eye)
    # E[g^2] = sum_i E[g_i^2] + sum_{i != j} c0_i c0_j
    rule = gh_rule(min(64, max(n_quad, 2 * k_max + 2)))
    m2_parts = np.array([rule.expect(lambda x, gi=gi: np.asarray(gi(x), dtype=float) ** 2) for gi in parts])
    c0 = lam[:, 0]
    m2 = float(m2_parts.sum() + c0.sum() ** 2 - np.sum(c0**2))
    total = math.fsum(math.factorial(k) * coeffs[k].frobenius_sq() for k in range(k_max + 1))
    return HermiteExpansion(coeffs, residual_norm=m2 - total, second_moment=m2)


def sequence_information_exponent(exp: HermiteExpansion, tol: float = 1e-7):
    """Smallest ``k >= 1`` whose coefficient tensor is non-negligible.

    A tensor counts as non-zero when its largest entry exceeds ``tol``
    times the largest entry over all orders ``k >= 1``. Returns
    ``BEYOND_TRUNCATION`` if every order up to ``K_max`` vanishes.
    """
    if exp.k_max < 1:
        raise ConfigError("need K_max >= 1")
    sizes = [exp[k].max_abs() for k in range(1, exp.k_max + 1)]
    top = max(sizes)
    if top == 0.0:
        return BEYOND_TRUNCATION
    for k, s in enumerate(sizes, start=1):
        if s > tol * top:
            return k
    return BEYOND_TRUNCATION


def contract(C: HermiteTensor, vectors: Sequence[np.ndarray]) -> float:
    """Full contraction ``C x (v_1, ..., v_k)``."""
    if len(vectors) != C.order:
        raise ConfigError(f"need {C.order} vectors, got {len(vectors)}")
    if C.order == 0:
        return float(C.to_dense())
    if C.is_odeco:
        prods = np.ones_like(C.eigenvalues)
        for v in vectors:
            prods = prods * (C.vectors @ np.asarray(v, dtype=float))
        return float(np.dot(C.eigenvalues, prods))
    t = C.dense
    for v in vectors:
        t = t @ np.asarray(v, dtype=float)
    return float(t)


def contract_partial(C: HermiteTensor, v: np.ndarray) -> np.ndarray:
    """``C x (I, v, ..., v)``: contract all but the first index with ``v``."""
    if C.order == 0:
        raise ConfigError("order-0 tensors have no free index")
    v = np.asarray(v, dtype=float)
    if C.is_odeco:
        return C.vectors.T @ (C.eigenvalues * (C.vectors @ v) ** (C.order - 1))
    t = C.dense
    for _ in range(C.order - 1):
        t = t @ v
    return np.asarray(t, dtype=float)


def contract_all_ones(C: HermiteTensor) -> float:
    """``C x (1, ..., 1)``."""
    if C.order == 0:
        return float(C.to_dense())
    if C.is_odeco:
        return float(np.dot(C.eigenvalues, C.vectors.sum(axis=1) ** C.order))
    return float(math.fsum(C.dense.ravel()))


def operator_norm(
    C: HermiteTensor, n_restarts: int = 32, n_iter: int = 200, seed: int = 0
) -> float:
    """Spectral norm ``max_{|x|=1} |C x (x, ..., x)|``.

    Exact for order <= 2 and for odeco tensors. Dense tensors of order 3 and
    above use shifted symmetric power iteration from ``n_restarts`` random
    starts on both ``C`` and ``-C``; a ``ConvergenceWarning`` is emitted when
    the best start has not settled after ``n_iter`` iterations.
    """
    k = C.order
    if k == 0:
        return abs(float(C.to_dense()))
    if k == 1:
        return float(np.linalg.norm(C.to_dense()))
    if C.is_odeco:
        return float(np.max(np.abs(C.eigenvalues)))
    if k == 2:
        return float(np.max(np.abs(np.linalg.eigvalsh(C.dense))))
    T = C.dense
    frob = math.sqrt(C.frobenius_sq())
    if frob == 0.0:
        return 0.0
    shift = (k - 1) * frob
    rng = np.random.default_rng(seed)
    starts = rng.standard_normal((n_restarts, C.dim))
    best, best_ok = -np.inf, True
    for sign in (1.0, -1.0):
        for x in starts:
            x = x / np.linalg.norm(x)
            val, ok = -np.inf, False
            for _ in range(n_iter):
                g = sign * _partial_dense(T, x)
                y = g + shift * x
                x = y / np.linalg.norm(y)
                new = sign * float(_partial_dense(T, x) @ x)
                if abs(new - val) <= 1e-13 * frob:
                    val, ok = new, True
                    break
                val = new
            if val > best:
                best, best_ok = val, ok
    if not best_ok:
        warnings.warn(
            f"power iteration did not converge in {n_iter} iterations; best estimate {best:.6g}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return float(best)


def _partial_dense(T: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = T
    for _ in range(T.ndim - 1):
        t = t @ x
    return t


# --- Hermite-product links -------------------------------------------------

def _normalize_terms(terms: Iterable, L: int) -> tuple:
    out = []
    for coef, degrees in terms:
        degrees = tuple(int(n) for n in degrees)
        if len(degrees) != L or min(degrees) < 0:
            raise ConfigError(f"term degrees {degrees} do not match L={L}")
        out.append((float(coef), degrees))
    return tuple(out)


def hermite_sum_link(terms: Iterable, L: int, name: str = "hermite-sum") -> LinkFunction:
    """Link ``g(z) = sum_t coef_t * prod_l He_{n_{t,l}}(z_l)``.

    Parameters
    ----------
    terms : iterable of (coef, degrees)
        ``degrees`` is a length-``L`` tuple of non-negative integers.
    """
    terms = _normalize_terms(terms, L)
    top = max((max(d) for _, d in terms), default=0)

    def evaluator(z):
        H = hermite_table(top, z)
        out = np.zeros(z.shape[:-1])
        for coef, degrees in terms:
            prod = np.full(z.shape[:-1], coef)
            for l, n in enumerate(degrees):
                if n:
                    prod = prod * H[..., l, n]
            out = out + prod
        return out

    return LinkFunction(L, 1, evaluator, "separable-hermite", {"terms": terms}, name)


def hermite_sum_expansion(terms: Iterable, L: int, k_max: int) -> HermiteExpansion:
    """Exact dense coefficients of a Hermite-product link.

    A term ``c * prod_l He_{n_l}`` contributes ``c * prod_l n_l! / k!`` at
    every index tuple with multiplicities ``n``, where ``k = sum(n)``.
    """
    terms = _normalize_terms(terms, L)
    by_order: dict = {k: {} for k in range(k_max + 1)}
    m2 = 0.0
    merged: dict = {}
    for coef, n in terms:
        merged[n] = merged.get(n, 0.0) + coef
    for n, coef in merged.items():
        k = sum(n)
        m2 += coef**2 * math.prod(math.factorial(x) for x in n)
        if k <= k_max:
            by_order[k][n] = coef * math.prod(math.factorial(x) for x in n) / math.factorial(k)
    coeffs = {}
    total = 0.0
    for k in range(k_max + 1):
        full = {n: by_order[k].get(n, 0.0) for n in _compositions(k, L)}
        C = HermiteTensor(k, L, dense=_fill_symmetric(k, L, full))
        coeffs[k] = C
        total += math.factorial(k) * C.frobenius_sq()
    return HermiteExpansion(coeffs, residual_norm=m2 - total, second_moment=m2)


def custom_link(fn: Callable[[np.ndarray], np.ndarray], L: int, k: int = 1, name: str = "custom") -> LinkFunction:
    """Wrap an arbitrary vectorized map as a ``custom`` link."""
    return LinkFunction(L, k, fn, "custom", {}, name)
