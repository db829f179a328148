"""One-pass spherical SGD with weak-recovery detection.

Two backends share one configuration type:

``full``
    Literal d-dimensional SGD with numpy. Every step draws a fresh
    ``L x d`` input. This is the reference implementation.
``reduced``
    The compiled chain in ``ssi_lab.sgd.kernels``, which has the same law on
    the sufficient statistics at cost independent of ``d``. Used for sweeps.

Step convention: ``w <- sqrt(d) (w - lr * grad) / ||w - lr * grad||`` with the
gradient of the per-sample squared loss, so the natural time is
``t = lr * step / d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DegeneratePolicyError, NonFiniteError, NumericalError
from ..hermite import HermiteTensor, LinkFunction, contract_all_ones, operator_norm
from ..models import (
    AttentionModel,
    Frame,
    NetworkModel,
    SufficientStats,
    attention_from_fields,
    init_weights,
    layout_coeffs,
    make_frame,
    positional_block,
    sample_sequence,
    softmax_rows,
    ssi_target,
    sufficient_stats,
)

__all__ = [
    "SgdConfig",
    "Trajectory",
    "SampleStream",
    "loss_and_grad",
    "spherical_step",
    "run_sgd",
    "weak_recovery_time",
    "gain",
    "learning_rate_policy",
]


@dataclass(frozen=True)
class SgdConfig:
    """Configuration of a single SGD run.

    Parameters
    ----------
    d, L : int
    model : AttentionModel or NetworkModel
    target : LinkFunction
    lr : float
        Step size ``gamma > 0``.
    t_max : int
        Step budget.
    eta : float
        Weak-recovery threshold on ``||(eps, m)||``.
    stride : int, optional
        Recording stride; defaults to ``max(1, t_max // 2000)``.
    seed : int
    sign_randomize : bool
        Draw the sign of the step once per run, ``+lr`` or ``-lr``.
    backend : {"reduced", "full"}
    stop : {"recovery", "none", "box"}
        ``box`` stops once ``|m| > stop_m`` or ``||eps|| > stop_e``.
    init : {"random", "target"} or tuple
        ``(m0, eps0)`` starts from given overlaps (reduced backend only).
    """

    d: int
    L: int
    model: AttentionModel | NetworkModel
    target: LinkFunction
    lr: float
    t_max: int
    eta: float = 0.3
    stride: int | None = None
    seed: int = 0
    sign_randomize: bool = False
    backend: str = "reduced"
    stop: str = "recovery"
    stop_m: float = 0.95
    stop_e: float = 0.95
    init: str | tuple = "random"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if self.t_max < 1:
            raise ConfigError("t_max must be at least 1")
        if self.d < 4 or self.L < 1:
            raise ConfigError("need d >= 4 and L >= 1")
        if self.backend not in ("reduced", "full"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.stop not in ("recovery", "none", "box"):
            raise ConfigError(f"unknown stop rule {self.stop!r}")
        if self.target.seq_len != self.L:
            raise ConfigError("target sequence length does not match L")
        if self.stride is None:
            object.__setattr__(self, "stride", max(1, self.t_max // 2000))
        if self.stride < 1:
            raise ConfigError("stride must be positive")

    @property
    def q(self) -> int:
        return layout_coeffs(self.model.layout, self.L).shape[1]


@dataclass(frozen=True)
class Trajectory:
    """Recorded sufficient statistics of one run.

    ``m`` has shape ``(n,)`` for tied weights and ``(n, L)`` for untied
    ones; ``eps`` has shape ``(n, q)``.
    """

    steps: np.ndarray
    m: np.ndarray
    eps: np.ndarray
    loss: np.ndarray
    recovery_step: int | None
    final_step: int
    eta: float
    lr: float
    tied: bool = True
    draws: int = 0

    @property
    def overlap(self) -> np.ndarray:
        """Semantic overlap per record (``m_untied`` for untied weights)."""
        if self.tied:
            return self.m
        return np.sqrt(np.mean(self.m**2, axis=1))

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(self.overlap**2 + np.sum(self.eps**2, axis=1))

    @property
    def final(self) -> SufficientStats:
        return self.stats(-1)

    @property
    def recovered(self) -> bool:
        return self.recovery_step is not None

    def stats(self, i: int) -> SufficientStats:
        eps = self.eps[i].copy()
        m = float(self.m[i]) if self.tied else self.m[i].copy()
        return SufficientStats(m, eps, eps)


class SampleStream:
    """Fresh Gaussian sequences with draw accounting.

    Each call returns a new ``L x d`` input from the generator; the running
    ``draws`` count lets callers check that no sample is ever reused.
    """

    def __init__(self, rng: np.random.Generator, L: int, d: int):
        self.rng, self.L, self.d = rng, L, d
        self.draws = 0

    def next(self) -> np.ndarray:
        X = sample_sequence(self.L, self.d, self.rng)
        self.draws += X.size
        return X


def loss_and_grad(model, w, X, y, P=None) -> tuple[float, np.ndarray]:
    """Squared loss ``||y - f_w(X)||^2`` and its gradient in ``w``.

    Attention gradients run through ``z``, the score matrix ``z z^T``, the
    row-softmax Jacobian ``diag(s) - s s^T`` and the reduction adjoint.
    """
    w = np.asarray(w, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    L, d = X.shape
    if isinstance(model, AttentionModel):
        if w.shape != (d,):
            raise ConfigError(f"weights {w.shape} do not match d={d}")
        Xp = X if P is None else X + np.asarray(P, dtype=float) / math.sqrt(d)
        z = Xp @ w
        S = np.outer(z, z)
        if model.injected is not None:
            c = np.asarray(model.injected, dtype=float)
            S = S + np.outer(c, c)
        A = softmax_rows(S)
        f = model.reduction.apply(A)
        res = f - y
        if res.shape != y.shape:
            raise ConfigError(f"label of size {y.size} does not match output {f.size}")
        dA = model.reduction.adjoint(2.0 * res, L)
        dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
        dz = (dS + dS.T) @ z
        grad = Xp.T @ dz
        loss = float(res @ res)
    elif isinstance(model, NetworkModel):
        sigma = model.activation
        sqL = math.sqrt(L)
        if model.tied:
            if w.shape != (d,):
                raise ConfigError(f"weights {w.shape} do not match d={d}")
            u = float(np.sum(X @ w)) / sqL
        else:
            if w.shape != (L, d):
                raise ConfigError(f"weights {w.shape} do not match ({L}, {d})")
            u = float(np.sum(X * w)) / sqL
        f = float(sigma(u))
        res = f - float(y[0])
        coef = 2.0 * res * float(sigma.deriv(u)) / sqL
        grad = coef * (X.sum(axis=0) if model.tied else X)
        loss = res * res
    else:
        raise ConfigError(f"unsupported model {type(model).__name__}")
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NonFiniteError("non-finite loss or gradient")
    return loss, grad


def spherical_step(w, grad, lr: float) -> np.ndarray:
    """Gradient step followed by projection back to the sphere of radius ``sqrt(d)``.

    Untied weights (2D) are renormalized row by row.
    """
    w = np.asarray(w, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not np.any(grad):
        return w.copy()
    d = w.shape[-1]
    v = w - lr * grad
    nrm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nrm == 0) or not np.all(np.isfinite(nrm)):
        raise NumericalError("update collapsed to the zero vector")
    return math.sqrt(d) * v / nrm


def _signed_lr(cfg: SgdConfig) -> float:
    if not cfg.sign_randomize:
        return cfg.lr
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5167]))
    return cfg.lr if rng.random() < 0.5 else -cfg.lr


def run_sgd(cfg: SgdConfig) -> Trajectory:
    """Run one-pass spherical SGD until recovery, the stop rule or ``t_max``."""
    if cfg.backend == "full":
        return _run_full(cfg)
    return _run_reduced(cfg)


def _init_code(cfg: SgdConfig, q: int):
    if isinstance(cfg.init, str):
        if cfg.init == "random":
            return 0, 0.0, np.zeros(q)
        if cfg.init == "target":
            return 1, 1.0, np.zeros(q)
        raise ConfigError(f"unknown init {cfg.init!r}")
    m0, eps0 = cfg.init
    eps0 = np.atleast_1d(np.asarray(eps0, dtype=float))
    if eps0.size != q or m0**2 + eps0 @ eps0 > 1 + 1e-12:
        raise ConfigError("initial overlaps must match the layout and lie in the unit ball")
    return 2, float(m0), eps0


def _target_code(target: LinkFunction, model):
    """Encode a link for the kernels: (code, coef, deg, kmax, omega, block)."""
    L = target.seq_len
    empty = (np.zeros(0), np.zeros((0, L), dtype=np.int64), 0, 0.0, np.zeros((L, L)))
    if target.kind == "separable-hermite":
        terms = target.params["terms"]
        coef = np.array([c for c, _ in terms], dtype=float)
        deg = np.array([n for _, n in terms], dtype=np.int64).reshape(len(terms), L)
        return (0, coef, deg, int(deg.max(initial=0)), 0.0, np.zeros((L, L)))
    if target.kind == "positional-semantic":
        p = target.params
        return (1,) + empty[:3] + (p["omega"], positional_block(p["a"]))
    if target.kind == "softmax-attention-target" and isinstance(model, AttentionModel):
        if target.params.get("reduction") != model.reduction.kind or model.reduction.kind == "bilinear":
            raise ConfigError("reduced backend needs the attention target to share the model reduction")
        return (2,) + empty
    raise ConfigError(f"the reduced backend cannot evaluate a {target.kind!r} link; use backend='full'")


def _run_reduced(cfg: SgdConfig) -> Trajectory:
    from . import kernels

    lr = _signed_lr(cfg)
    model = cfg.model
    stop_mode = {"none": kernels.STOP_NONE, "recovery": kernels.STOP_RECOVERY, "box": kernels.STOP_BOX}[cfg.stop]
    tcode, tcoef, tdeg, tkmax, omega, block = _target_code(cfg.target, model)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    if isinstance(model, AttentionModel):
        C = layout_coeffs(model.layout, cfg.L)
        q = C.shape[1]
        mode, m0, eps0 = _init_code(cfg, q)
        red = model.reduction
        al = np.asarray(red.a_left if red.kind == "bilinear" else np.zeros(cfg.L), dtype=float)
        ar = np.asarray(red.a_right if red.kind == "bilinear" else np.zeros(cfg.L), dtype=float)
        cinj = np.zeros(cfg.L) if model.injected is None else np.asarray(model.injected, dtype=float)
        out = kernels.attention_kernel(
            rng, cfg.d, cfg.L, cfg.t_max, lr, np.ascontiguousarray(C), cinj, red.code, al, ar,
            tcode, tcoef, tdeg, tkmax, omega, np.ascontiguousarray(block),
            cfg.eta, cfg.stride, stop_mode, cfg.stop_m, cfg.stop_e, mode, m0, eps0,
        )
        steps, ms, es, ls, n, rec, final, *_ = out
        tied = True
    else:
        if tcode != 0:
            raise ConfigError("networks need a scalar Hermite-product target")
        if cfg.stop == "box":
            raise ConfigError("the box stop rule applies to attention runs only")
        mode, m0, _ = _init_code(cfg, 0)
        act = model.activation
        acoef = np.asarray(act.he_coeffs if act.code == 3 else (), dtype=float)
        out = kernels.network_kernel(
            rng, cfg.d, cfg.L, cfg.t_max, lr, model.tied, act.code, acoef, tcoef, tdeg, tkmax,
            cfg.eta, cfg.stride, stop_mode, mode, m0,
        )
        steps, ms, ls, n, rec, final, *_ = out
        es = np.zeros((ms.shape[0], 0))
        tied = model.tied
        ms = ms[:, 0] if tied else ms
    if n < 0:
        raise NumericalError(f"state collapsed or became non-finite at step {final}")
    m = ms[:n].copy()
    return Trajectory(
        steps[:n].copy(), m, es[:n].copy(), ls[:n].copy(),
        None if rec < 0 else int(rec), int(final), cfg.eta, lr, tied,
    )


def _run_full(cfg: SgdConfig) -> Trajectory:
    lr = _signed_lr(cfg)
    model = cfg.model
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    injected = getattr(model, "injected", None)
    frame = make_frame(cfg.d, cfg.L, rng, model.layout, injected)
    tied = model.tied
    rows = None if tied else cfg.L
    if cfg.init == "target":
        w = frame.w_star.copy() if tied else np.tile(frame.w_star, (cfg.L, 1))
    elif cfg.init == "random":
        w = init_weights(cfg.d, rng, rows)
    else:
        raise ConfigError("the full backend supports init='random' or 'target'")
    P = frame.P if frame.encoding.basis.shape[0] else None
    stream = SampleStream(rng, cfg.L, cfg.d)

    def stats(w):
        s = sufficient_stats(w, frame.w_star, frame.encoding)
        return s.m_scalar if tied else np.asarray(s.m), s.eps if tied else np.zeros(0), s

    rec_steps, rec_m, rec_e, rec_l = [], [], [], []
    loss = float("nan")
    rec = None
    t = 0
    while True:
        m, eps, s = stats(w)
        norm = s.norm
        if rec is None and norm >= cfg.eta:
            rec = t
        stopping = (cfg.stop == "recovery" and rec is not None) or (
            cfg.stop == "box" and (abs(s.m_scalar) > cfg.stop_m or float(np.linalg.norm(eps)) > cfg.stop_e)
        )
        if t % cfg.stride == 0 or stopping or t == cfg.t_max or t == rec:
            rec_steps.append(t)
            rec_m.append(m)
            rec_e.append(eps)
            rec_l.append(loss)
        if stopping or t == cfg.t_max:
            break
        X = stream.next()
        y = ssi_target(cfg.target, frame.w_star, X)
        loss, grad = loss_and_grad(model, w, X, y, P)
        w = spherical_step(w, grad, lr)
        t += 1
    q = len(rec_e[0])
    return Trajectory(
        np.asarray(rec_steps, dtype=np.int64), np.asarray(rec_m, dtype=float),
        np.asarray(rec_e, dtype=float).reshape(len(rec_e), q), np.asarray(rec_l),
        rec, t, cfg.eta, lr, tied, stream.draws,
    )


def weak_recovery_time(traj: Trajectory, eta: float | None = None) -> int | None:
    """First step with ``||(eps, m)|| >= eta``.

    For the threshold the run was made with, the exact per-step crossing is
    returned; other thresholds are read off the recorded path.
    """
    if eta is None or eta == traj.eta:
        return traj.recovery_step
    hit = np.nonzero(traj.norms >= eta)[0]
    return int(traj.steps[hit[0]]) if hit.size else None


def gain(tau_untied: int | None, tau_tied: int | None) -> float | None:
    """``tau_untied / tau_tied``; ``None`` when either run did not recover."""
    if tau_untied is None or tau_tied is None:
        return None
    if tau_tied == 0:
        return 1.0 if tau_untied == 0 else math.inf
    return tau_untied / tau_tied


def learning_rate_policy(
    policy: str,
    c_sie: HermiteTensor | None = None,
    L: int | None = None,
    scale: float = 1.0,
    gamma0: float | None = None,
) -> float:
    """Learning rate for a named policy.

    Parameters
    ----------
    policy : {"optimal-tied", "optimal-untied", "constant", "over-scaled"}
        ``optimal-tied`` is ``scale * |C x (1, ..., 1)|``, ``optimal-untied``
        is ``scale * ||C||_op``, ``constant`` is ``gamma0`` and
        ``over-scaled`` is ``gamma0 * L``.
    c_sie : HermiteTensor
        Leading Hermite coefficient of the target.
    scale : float
        Calibration constant; the bounds only fix the scaling.
    """
    if policy == "constant":
        if gamma0 is None or gamma0 <= 0:
            raise ConfigError("constant policy needs gamma0 > 0")
        return float(gamma0)
    if policy == "over-scaled":
        if gamma0 is None or gamma0 <= 0 or L is None:
            raise ConfigError("over-scaled policy needs gamma0 > 0 and L")
        return float(gamma0) * L
    if c_sie is None:
        raise ConfigError(f"{policy} needs the leading Hermite coefficient")
    if policy == "optimal-tied":
        val = abs(contract_all_ones(c_sie))
        if val < 1e-12:
            raise DegeneratePolicyError("C x (1, ..., 1) = 0: the tied bound is degenerate")
        return scale * val
    if policy == "optimal-untied":
        return scale * operator_norm(c_sie)
    raise ConfigError(f"unknown learning-rate policy {policy!r}")
