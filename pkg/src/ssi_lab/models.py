"""Forward models, targets and sufficient statistics.

Conventions: ``||w|| = ||w*|| = sqrt(d)``, input entries are ``N(0, 1/d)``,
and the positional encoding is ``P = C Q`` where the rows of ``Q`` (q x d)
are orthonormal and orthogonal to ``w*``. The frame coordinates
``eps = Q w / sqrt(d)`` together with ``m = w* . w / d`` live in the unit
ball; the per-token offsets are ``e = C eps = P w / sqrt(d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, FrameError, NonFiniteError
from .hermite import LinkFunction, hermite_coeffs_1d, hermite_table

__all__ = [
    "sample_sequence",
    "softmax_rows",
    "ReductionMap",
    "Activation",
    "ACTIVATIONS",
    "get_activation",
    "hermite_activation",
    "PositionalEncoding",
    "layout_coeffs",
    "Frame",
    "make_frame",
    "init_weights",
    "AttentionModel",
    "NetworkModel",
    "attention_from_fields",
    "tied_attention_forward",
    "injected_attention_forward",
    "ssi_target",
    "tied_network_forward",
    "untied_network_forward",
    "SufficientStats",
    "sufficient_stats",
    "positional_block",
    "positional_semantic_link",
    "attention_target_link",
]


def sample_sequence(L: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an ``L x d`` matrix with i.i.d. ``N(0, 1/d)`` entries."""
    if L < 1 or d < 2:
        raise ConfigError("need L >= 1 and d >= 2")
    return rng.standard_normal((L, d)) / math.sqrt(d)


def softmax_rows(A: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction."""
    A = np.asarray(A, dtype=float)
    L = A.shape[-1]
    if A.ndim < 3 or L > 8:
        E = np.exp(A - A.max(axis=-1, keepdims=True))
        return E / E.sum(axis=-1, keepdims=True)
    # batched short rows: unrolled reductions beat ufunc.reduce on a tiny axis
    mx = A[..., 0].copy()
    for j in range(1, L):
        np.maximum(mx, A[..., j], out=mx)
    E = np.exp(A - mx[..., None])
    tot = E[..., 0].copy()
    for j in range(1, L):
        tot += E[..., j]
    return E / tot[..., None]


@dataclass(frozen=True)
class ReductionMap:
    """Fixed map from an ``L x L`` attention matrix to ``R^k``.

    ``trace`` gives ``k = 1``, ``full`` flattens row-major (``k = L^2``),
    ``bilinear`` gives ``a_left^T A a_right``.
    """

    kind: str = "full"
    a_left: tuple | None = None
    a_right: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("trace", "full", "bilinear"):
            raise ConfigError(f"unknown reduction {self.kind!r}")
        if self.kind == "bilinear":
            if self.a_left is None or self.a_right is None:
                raise ConfigError("bilinear reduction needs a_left and a_right")
            al = tuple(float(x) for x in self.a_left)
            ar = tuple(float(x) for x in self.a_right)
            if len(al) != len(ar) or not all(math.isfinite(x) for x in al + ar):
                raise ConfigError("bilinear vectors must be finite and of equal length")
            object.__setattr__(self, "a_left", al)
            object.__setattr__(self, "a_right", ar)

    @classmethod
    def trace(cls) -> "ReductionMap":
        return cls("trace")

    @classmethod
    def full(cls) -> "ReductionMap":
        return cls("full")

    @classmethod
    def bilinear(cls, a_left, a_right) -> "ReductionMap":
        return cls("bilinear", tuple(a_left), tuple(a_right))

    @property
    def code(self) -> int:
        return {"trace": 0, "full": 1, "bilinear": 2}[self.kind]

    def out_dim(self, L: int) -> int:
        return L * L if self.kind == "full" else 1

    def apply(self, A: np.ndarray) -> np.ndarray:
        """``(..., L, L) -> (..., k)``."""
        A = np.asarray(A, dtype=float)
        L = A.shape[-1]
        if self.kind == "trace":
            return np.trace(A, axis1=-2, axis2=-1)[..., None]
        if self.kind == "full":
            return A.reshape(A.shape[:-2] + (L * L,))
        al, ar = np.asarray(self.a_left), np.asarray(self.a_right)
        if al.size != L:
            raise ConfigError(f"bilinear vectors have length {al.size}, matrix has L={L}")
        return np.einsum("i,...ij,j->...", al, A, ar)[..., None]

    def adjoint(self, G: np.ndarray, L: int) -> np.ndarray:
        """Pull a cotangent ``(..., k)`` back to ``(..., L, L)``."""
        G = np.asarray(G, dtype=float)
        if self.kind == "trace":
            return G[..., :1, None] * np.eye(L)
        if self.kind == "full":
            return G.reshape(G.shape[:-1] + (L, L))
        outer = np.outer(self.a_left, self.a_right)
        return G[..., :1, None] * outer


@dataclass(frozen=True)
class Activation:
    """Pointwise activation with derivative.

    ``kinks`` lists points of non-smoothness, used to integrate Hermite
    coefficients piecewise.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    kinks: tuple = ()
    code: int = -1
    he_coeffs: tuple = ()

    def __call__(self, x):
        return self.fn(x)

    def hermite_coeffs(self, k_max: int) -> np.ndarray:
        """``c_k(sigma)`` for ``k = 0..k_max``."""
        if self.he_coeffs:
            out = np.zeros(k_max + 1)
            n = min(k_max + 1, len(self.he_coeffs))
            out[:n] = self.he_coeffs[:n]
            return out
        return hermite_coeffs_1d(self.fn, k_max, 64, self.kinks or None)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_d(x):
    return (np.asarray(x) > 0).astype(float)


ACTIVATIONS = {
    "relu": Activation("relu", _relu, _relu_d, (0.0,), 0),
    "square": Activation("square", lambda x: np.asarray(x) ** 2, lambda x: 2.0 * np.asarray(x), (), 1, (1.0, 0.0, 1.0)),
    "identity": Activation("identity", lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(np.asarray(x, dtype=float)), (), 2, (0.0, 1.0)),
}


def hermite_activation(coeffs) -> Activation:
    """Polynomial activation ``sigma(x) = sum_k a_k He_k(x)``."""
    a = np.asarray(coeffs, dtype=float)
    K = a.size - 1

    def fn(x):
        return hermite_table(K, x) @ a

    def deriv(x):
        if K == 0:
            return np.zeros_like(np.asarray(x, dtype=float))
        # He_k' = k He_{k-1}
        return hermite_table(K - 1, x) @ (np.arange(1, K + 1) * a[1:])

    return Activation("hermite", fn, deriv, (), 3, tuple(a))


def get_activation(name) -> Activation:
    if isinstance(name, Activation):
        return name
    if isinstance(name, (list, tuple)):
        return hermite_activation(name)
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


def layout_coeffs(layout: str, L: int) -> np.ndarray:
    """Coefficient matrix ``C`` (L x q) of a positional layout.

    ``none`` has ``q = 0``; ``orthonormal`` is ``C = I_L``; ``antipodal``
    (two tokens, ``P_1 = -P_2``) is ``C = [[1], [-1]]``.
    """
    if layout == "none":
        return np.zeros((L, 0))
    if layout == "orthonormal":
        return np.eye(L)
    if layout == "antipodal":
        if L != 2:
            raise ConfigError("antipodal layout needs L = 2")
        return np.array([[1.0], [-1.0]])
    raise ConfigError(f"unknown positional layout {layout!r}")


@dataclass(frozen=True)
class PositionalEncoding:
    """Positional matrix ``P = coeffs @ basis`` plus optional injection ``c``."""

    basis: np.ndarray
    coeffs: np.ndarray
    injected: np.ndarray | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.basis, dtype=float))
        C = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if C.shape[1] != Q.shape[0]:
            raise ConfigError(f"coeffs {C.shape} do not match basis {Q.shape}")
        object.__setattr__(self, "basis", Q)
        object.__setattr__(self, "coeffs", C)
        if self.injected is not None:
            c = np.asarray(self.injected, dtype=float).ravel()
            if c.size != C.shape[0]:
                raise ConfigError("injected coefficients must have length L")
            object.__setattr__(self, "injected", c)

    @classmethod
    def from_matrix(cls, P: np.ndarray, injected=None) -> "PositionalEncoding":
        """Factor a raw ``L x d`` matrix through an orthonormal row basis."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if not np.any(P):
            return cls(np.zeros((0, P.shape[1])), np.zeros((P.shape[0], 0)), injected)
        U, s, Vt = np.linalg.svd(P, full_matrices=False)
        r = int(np.sum(s > 1e-10 * s[0]))
        Q = Vt[:r]
        return cls(Q, P @ Q.T, injected)

    @property
    def P(self) -> np.ndarray:
        return self.coeffs @ self.basis

    @property
    def L(self) -> int:
        return self.coeffs.shape[0]

    def check(self, w_star: np.ndarray, tol: float = 1e-10) -> None:
        """Raise ``FrameError`` unless the basis and ``w*/sqrt(d)`` are orthonormal."""
        d = w_star.size
        Q = self.basis
        if Q.shape[0] and Q.shape[1] != d:
            raise FrameError("basis dimension does not match w*")
        F = np.vstack([w_star / math.sqrt(d), Q])
        if np.max(np.abs(F @ F.T - np.eye(F.shape[0]))) > tol:
            raise FrameError("frame {w*/sqrt(d), basis} is not orthonormal")

    def rows_orthonormal(self, tol: float = 1e-10) -> bool:
        P = self.P
        return bool(np.max(np.abs(P @ P.T - np.eye(P.shape[0])), initial=0.0) <= tol)


@dataclass(frozen=True)
class Frame:
    """Target direction and positional encoding for one run."""

    w_star: np.ndarray
    encoding: PositionalEncoding

    @property
    def d(self) -> int:
        return self.w_star.size

    @property
    def P(self) -> np.ndarray:
        return self.encoding.P


def make_frame(d: int, L: int, rng: np.random.Generator, layout: str = "none", injected=None) -> Frame:
    """Sample ``w*`` on the sphere of radius ``sqrt(d)`` and a positional basis.

    Basis rows come from QR of fresh Gaussian vectors stacked after ``w*``,
    so they are orthonormal and orthogonal to ``w*`` by construction.
    """
    C = layout_coeffs(layout, L)
    q = C.shape[1]
    if q + 1 > d:
        raise ConfigError("d too small for the positional layout")
    G = rng.standard_normal((d, q + 1))
    Qfull, Rr = np.linalg.qr(G)
    Qfull = Qfull * np.sign(np.diag(Rr))
    w_star = math.sqrt(d) * Qfull[:, 0]
    basis = Qfull[:, 1:].T.copy()
    return Frame(w_star, PositionalEncoding(basis, C, injected))


def init_weights(d: int, rng: np.random.Generator, rows: int | None = None) -> np.ndarray:
    """Uniform draw on the sphere of radius ``sqrt(d)`` (per row if ``rows``)."""
    shape = (d,) if rows is None else (rows, d)
    w = rng.standard_normal(shape)
    return math.sqrt(d) * w / np.linalg.norm(w, axis=-1, keepdims=True)


@dataclass(frozen=True)
class AttentionModel:
    """Tied single-layer attention ``R[softmax(z z^T + c c^T)]``."""

    reduction: ReductionMap = field(default_factory=ReductionMap.full)
    layout: str = "none"
    injected: tuple | None = None

    tied: bool = field(default=True, init=False)
    family: str = field(default="attention", init=False)


@dataclass(frozen=True)
class NetworkModel:
    """Tied or untied generalized linear network ``sigma(sum_i z_i / sqrt(L))``."""

    activation: Activation = field(default_factory=lambda: ACTIVATIONS["relu"])
    tied: bool = True

    layout: str = field(default="none", init=False)
    family: str = field(default="network", init=False)


def attention_from_fields(z: np.ndarray, R: ReductionMap, c: np.ndarray | None = None) -> np.ndarray:
    """Attention output for local fields ``z`` of shape ``(..., L)``."""
    z = np.asarray(z, dtype=float)
    S = z[..., :, None] * z[..., None, :]
    if c is not None:
        S = S + np.outer(c, c)
    return R.apply(softmax_rows(S))


def _check_attention_shapes(w, X, P):
    L, d = X.shape
    if w.shape != (d,):
        raise ConfigError(f"weights of shape {w.shape} do not match d={d}")
    if P is not None and P.shape != (L, d):
        raise ConfigError(f"P of shape {P.shape} does not match X {X.shape}")


def tied_attention_forward(w, P, X, R: ReductionMap) -> np.ndarray:
    """``R[softmax_rows(z z^T)]`` with ``z = (X + P/sqrt(d)) w``."""
    w, X = np.asarray(w, dtype=float), np.asarray(X, dtype=float)
    P = None if P is None else np.asarray(P, dtype=float)
    _check_attention_shapes(w, X, P)
    z = X @ w if P is None else (X + P / math.sqrt(X.shape[1])) @ w
    return attention_from_fields(z, R)


def injected_attention_forward(w, c, P_tilde, X, R: ReductionMap) -> np.ndarray:
    """Attention with an injected rank-one score term ``c c^T``.

    With ``c = 0`` this reproduces ``tied_attention_forward`` exactly.
    """
    w, X = np.asarray(w, dtype=float), np.asarray(X, dtype=float)
    P = None if P_tilde is None else np.asarray(P_tilde, dtype=float)
    _check_attention_shapes(w, X, P)
    c = np.asarray(c, dtype=float).ravel()
    if c.size != X.shape[0]:
        raise ConfigError("injected coefficients must have length L")
    z = X @ w if P is None else (X + P / math.sqrt(X.shape[1])) @ w
    if not np.any(c):
        return attention_from_fields(z, R)
    return attention_from_fields(z, R, c)


def ssi_target(g: LinkFunction, w_star, X) -> np.ndarray:
    """Label ``g(X w*)`` as a length-``k`` vector."""
    X = np.asarray(X, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    if w_star.shape != (X.shape[1],):
        raise ConfigError("w* does not match the input dimension")
    if X.shape[0] != g.seq_len:
        raise ConfigError(f"link expects L={g.seq_len}, got {X.shape[0]} tokens")
    return g.evaluate((X @ w_star)[None, :])[0]


def tied_network_forward(w, X, sigma) -> float:
    """``sigma(sum_i X_i . w / sqrt(L))``."""
    sigma = get_activation(sigma)
    w, X = np.asarray(w, dtype=float), np.asarray(X, dtype=float)
    if w.shape != (X.shape[1],):
        raise ConfigError("weights do not match the input dimension")
    u = np.sum(X @ w) / math.sqrt(X.shape[0])
    return float(sigma(u))


def untied_network_forward(W, X, sigma) -> float:
    """``sigma(sum_i X_i . W_i / sqrt(L))``."""
    sigma = get_activation(sigma)
    W, X = np.asarray(W, dtype=float), np.asarray(X, dtype=float)
    if W.shape != X.shape:
        raise ConfigError(f"weights {W.shape} do not match input {X.shape}")
    u = np.sum(np.einsum("ij,ij->i", X, W)) / math.sqrt(X.shape[0])
    return float(sigma(u))


@dataclass(frozen=True)
class SufficientStats:
    """Overlaps of the weights with the target and positional directions.

    Attributes
    ----------
    m : float or ndarray
        Semantic overlap; a length-L vector for untied weights.
    e : ndarray
        Per-token positional offsets ``P w / sqrt(d)``.
    eps : ndarray
        Frame coordinates ``Q w / sqrt(d)``; equal to ``e`` for orthonormal P.
    """

    m: float | np.ndarray
    e: np.ndarray
    eps: np.ndarray

    @property
    def untied(self) -> bool:
        return np.ndim(self.m) == 1

    @property
    def m_untied(self) -> float:
        m = np.asarray(self.m)
        return float(np.linalg.norm(m) / math.sqrt(m.size))

    @property
    def m_scalar(self) -> float:
        return self.m_untied if self.untied else float(self.m)

    @property
    def norm(self) -> float:
        """``||(eps, m)||``; untied weights use ``m_untied``."""
        return math.sqrt(float(np.sum(self.eps**2)) + self.m_scalar**2)


def sufficient_stats(state, w_star, P=None) -> SufficientStats:
    """Sufficient statistics of ``w`` (shape d) or ``W`` (shape L x d).

    ``P`` may be ``None``, a raw matrix, a ``PositionalEncoding`` or a
    ``Frame``. The frame made of ``w*/sqrt(d)`` and the positional basis must
    be orthonormal.
    """
    state = np.asarray(state, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    d = w_star.size
    if isinstance(P, Frame):
        P = P.encoding
    if P is None:
        enc = PositionalEncoding(np.zeros((0, d)), np.zeros((1, 0)))
    elif isinstance(P, PositionalEncoding):
        enc = P
    else:
        enc = PositionalEncoding.from_matrix(P)
    enc.check(w_star)
    if not np.all(np.isfinite(state)):
        raise NonFiniteError("weights are not finite")
    if state.ndim == 1:
        m = float(w_star @ state) / d
        eps = enc.basis @ state / math.sqrt(d)
        e = enc.coeffs @ eps if enc.basis.shape[0] else np.zeros(0)
        return SufficientStats(m, e, eps)
    m = state @ w_star / d
    eps = state @ enc.basis.T / math.sqrt(d)  # (L, q): per-row coordinates
    return SufficientStats(m, eps.ravel() if eps.size else np.zeros(0), eps.ravel() if eps.size else np.zeros(0))


def positional_block(a: float) -> np.ndarray:
    """``softmax_rows([[a^2, -a^2], [-a^2, a^2]])``."""
    s = a * a
    return softmax_rows(np.array([[s, -s], [-s, s]]))


def positional_semantic_link(omega: float, a: float) -> LinkFunction:
    """Two-token target mixing semantic and positional attention.

    ``g(z*) = (1 - omega) softmax_rows(z* z*^T) + omega softmax_rows(A_a)``,
    flattened row-major to ``R^4``.
    """
    if not (0.0 <= omega <= 1.0):
        raise ConfigError("omega must lie in [0, 1]")
    block = positional_block(a).ravel()

    def evaluator(z):
        S = z[..., :, None] * z[..., None, :]
        sem = softmax_rows(S).reshape(z.shape[:-1] + (4,))
        return (1.0 - omega) * sem + omega * block

    return LinkFunction(2, 4, evaluator, "positional-semantic", {"omega": float(omega), "a": float(a)},
                        f"positional-semantic(omega={omega:g}, a={a:g})")


def attention_target_link(R: ReductionMap, L: int) -> LinkFunction:
    """Target produced by the attention map itself, ``R[softmax_rows(z* z*^T)]``."""
    def evaluator(z):
        return attention_from_fields(z, R)

    return LinkFunction(L, R.out_dim(L), evaluator, "softmax-attention-target", {"reduction": R.kind},
                        f"attention-target({R.kind})")
