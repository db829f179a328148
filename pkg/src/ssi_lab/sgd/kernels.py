"""Compiled SGD kernels on the reduced state.

Each kernel tracks the unit-sphere coordinates of ``W = w / sqrt(d)`` in the
frame ``(w*/sqrt(d), Q_1..Q_q, u)``, where ``u`` is the unit direction of the
remaining component: ``W = m w*/sqrt(d) + sum_j eps_j Q_j + r u``. Fresh
samples are isotropic in the orthogonal complement, so one step only needs
the gradient components along the frame plus the norm of its complement
part, which is ``sqrt(sum_i b_i^2 * chi2_{d-q-2}) / sqrt(d)``. The resulting
chain has the same law as full d-dimensional SGD.

Codes
-----
activation: 0 relu, 1 square, 2 identity, 3 Hermite polynomial (``act``).
target: 0 Hermite-product sum (scalar), 1 positional/semantic mix,
2 attention target with the model's own reduction.
reduction: 0 trace, 1 full matrix, 2 bilinear.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

STOP_NONE = 0
STOP_RECOVERY = 1
STOP_BOX = 2


@njit(cache=True)
def _he_row(x, kmax, out):
    out[0] = 1.0
    if kmax >= 1:
        out[1] = x
    for j in range(1, kmax):
        out[j + 1] = x * out[j] - j * out[j - 1]


@njit(cache=True)
def _act(code, coeffs, x):
    """Return (sigma(x), sigma'(x))."""
    if code == 0:
        if x > 0.0:
            return x, 1.0
        return 0.0, 0.0
    if code == 1:
        return x * x, 2.0 * x
    if code == 2:
        return x, 1.0
    K = coeffs.size - 1
    h = np.empty(K + 1)
    _he_row(x, K, h)
    f = 0.0
    df = 0.0
    for k in range(K + 1):
        f += coeffs[k] * h[k]
        if k >= 1:
            df += coeffs[k] * k * h[k - 1]
    return f, df


@njit(cache=True)
def _hermite_target(zs, tcoef, tdeg, kmax, H):
    L = zs.size
    for i in range(L):
        _he_row(zs[i], kmax, H[i])
    y = 0.0
    for t in range(tcoef.size):
        p = tcoef[t]
        for i in range(L):
            n = tdeg[t, i]
            if n > 0:
                p *= H[i, n]
        y += p
    return y


@njit(cache=True)
def _softmax_rows(S, A):
    L = S.shape[0]
    for i in range(L):
        mx = S[i, 0]
        for j in range(1, L):
            if S[i, j] > mx:
                mx = S[i, j]
        tot = 0.0
        for j in range(L):
            A[i, j] = math.exp(S[i, j] - mx)
            tot += A[i, j]
        for j in range(L):
            A[i, j] /= tot


@njit(cache=True)
def _reduce(code, A, al, ar, out):
    L = A.shape[0]
    if code == 0:
        s = 0.0
        for i in range(L):
            s += A[i, i]
        out[0] = s
    elif code == 1:
        for i in range(L):
            for j in range(L):
                out[i * L + j] = A[i, j]
    else:
        s = 0.0
        for i in range(L):
            for j in range(L):
                s += al[i] * A[i, j] * ar[j]
        out[0] = s


@njit(cache=True)
def _adjoint(code, G, al, ar, dA):
    L = dA.shape[0]
    for i in range(L):
        for j in range(L):
            if code == 0:
                dA[i, j] = G[0] if i == j else 0.0
            elif code == 1:
                dA[i, j] = G[i * L + j]
            else:
                dA[i, j] = G[0] * al[i] * ar[j]


@njit(cache=True)
def _init_frame(rng, mode, q, d, m0, eps0, out_eps):
    """Return (m, r) and fill ``out_eps``; mode 0 random, 1 target, 2 given."""
    if mode == 1:
        for j in range(q):
            out_eps[j] = 0.0
        return 1.0, 0.0
    if mode == 2:
        s = m0 * m0
        for j in range(q):
            out_eps[j] = eps0[j]
            s += eps0[j] * eps0[j]
        return m0, math.sqrt(max(0.0, 1.0 - s))
    g0 = rng.standard_normal()
    s = g0 * g0
    for j in range(q):
        out_eps[j] = rng.standard_normal()
        s += out_eps[j] * out_eps[j]
    c = rng.chisquare(d - q - 1.0)
    n = math.sqrt(s + c)
    for j in range(q):
        out_eps[j] /= n
    return g0 / n, math.sqrt(c) / n


@njit(cache=True)
def attention_kernel(
    rng, d, L, T, lr, C, cinj, red, al, ar,
    tcode, tcoef, tdeg, tkmax, omega, block,
    eta, stride, stop_mode, stop_m, stop_e, init_mode, m0, eps0,
):
    """Tied attention ``R[softmax(z z^T + c c^T)]`` on the reduced state.

    Returns
    -------
    steps, ms, eps (n, q), losses, n_rec, rec_step, final_step, m, eps, r
    """
    q = C.shape[1]
    k = L * L if red == 1 else 1
    cap = T // stride + 3
    steps = np.empty(cap, dtype=np.int64)
    ms = np.empty(cap)
    es = np.empty((cap, q))
    ls = np.empty(cap)
    eps = np.empty(q)
    m, r = _init_frame(rng, init_mode, q, d, m0, eps0, eps)
    zs = np.empty(L)
    zeta = np.empty((L, q))
    xi = np.empty(L)
    z = np.empty(L)
    S = np.empty((L, L))
    A = np.empty((L, L))
    dA = np.empty((L, L))
    dS = np.empty((L, L))
    f = np.empty(k)
    y = np.empty(k)
    G = np.empty(k)
    b = np.empty(L)
    ge = np.empty(q)
    H = np.empty((L, max(tkmax, 1) + 1))
    rec = -1
    n = 0
    t = 0
    loss = np.nan
    nrm = m * m
    for j in range(q):
        nrm += eps[j] * eps[j]
    if math.sqrt(nrm) >= eta:
        rec = 0
    while True:
        stopping = False
        if stop_mode == STOP_RECOVERY and rec >= 0:
            stopping = True
        if stop_mode == STOP_BOX:
            ee = 0.0
            for j in range(q):
                ee += eps[j] * eps[j]
            if abs(m) > stop_m or math.sqrt(ee) > stop_e:
                stopping = True
        if t % stride == 0 or stopping or t == T or t == rec:
            steps[n] = t
            ms[n] = m
            for j in range(q):
                es[n, j] = eps[j]
            ls[n] = loss
            n += 1
        if stopping or t == T:
            break
        # sample local fields
        for i in range(L):
            zs[i] = rng.standard_normal()
            xi[i] = rng.standard_normal()
            zi = m * zs[i] + r * xi[i]
            for j in range(q):
                zeta[i, j] = rng.standard_normal()
                zi += eps[j] * (zeta[i, j] + C[i, j])
            z[i] = zi
        # target
        if tcode == 0:
            y[0] = _hermite_target(zs, tcoef, tdeg, tkmax, H)
        else:
            for i in range(L):
                for j in range(L):
                    S[i, j] = zs[i] * zs[j]
            _softmax_rows(S, A)
            if tcode == 1:
                for i in range(L):
                    for j in range(L):
                        y[i * L + j] = (1.0 - omega) * A[i, j] + omega * block[i, j]
            else:
                _reduce(red, A, al, ar, y)
        # model
        for i in range(L):
            for j in range(L):
                S[i, j] = z[i] * z[j] + cinj[i] * cinj[j]
        _softmax_rows(S, A)
        _reduce(red, A, al, ar, f)
        loss = 0.0
        for a in range(k):
            G[a] = 2.0 * (f[a] - y[a])
            loss += (f[a] - y[a]) ** 2
        _adjoint(red, G, al, ar, dA)
        for i in range(L):
            s = 0.0
            for j in range(L):
                s += dA[i, j] * A[i, j]
            for j in range(L):
                dS[i, j] = A[i, j] * (dA[i, j] - s)
        sb = 0.0
        for i in range(L):
            acc = 0.0
            for j in range(L):
                acc += (dS[i, j] + dS[j, i]) * z[j]
            b[i] = acc
            sb += acc * acc
        gm = 0.0
        gu = 0.0
        for j in range(q):
            ge[j] = 0.0
        for i in range(L):
            gm += b[i] * zs[i]
            gu += b[i] * xi[i]
            for j in range(q):
                ge[j] += b[i] * (zeta[i, j] + C[i, j])
        go = math.sqrt(sb * rng.chisquare(d - q - 2.0))
        m = m - lr * gm / d
        tot = m * m
        for j in range(q):
            eps[j] = eps[j] - lr * ge[j] / d
            tot += eps[j] * eps[j]
        ru = r - lr * gu / d
        ro = lr * go / d
        r2 = ru * ru + ro * ro
        tot = math.sqrt(tot + r2)
        if not (tot > 0.0) or not math.isfinite(tot):
            return steps, ms, es, ls, -(n + 1), rec, t, m, eps, r
        m /= tot
        for j in range(q):
            eps[j] /= tot
        r = math.sqrt(r2) / tot
        t += 1
        if rec < 0:
            nrm = m * m
            for j in range(q):
                nrm += eps[j] * eps[j]
            if math.sqrt(nrm) >= eta:
                rec = t
    return steps, ms, es, ls, n, rec, t, m, eps, r


@njit(cache=True)
def network_kernel(
    rng, d, L, T, lr, tied, acode, acoef, tcoef, tdeg, tkmax,
    eta, stride, stop_mode, init_mode, m0,
):
    """Tied or untied network ``sigma(sum_i z_i / sqrt(L))`` on the reduced state.

    The tied state is ``(m, r)``. Untied weights keep one ``(m_i, r_i)``
    pair per row; row ``i`` only sees token ``i``, so each row evolves in its
    own frame with a ``chi2_{d-2}`` complement. Recovery uses
    ``m_untied = ||m|| / sqrt(L)``.
    """
    R = 1 if tied else L
    cap = T // stride + 3
    steps = np.empty(cap, dtype=np.int64)
    ms = np.empty((cap, R))
    ls = np.empty(cap)
    m = np.empty(R)
    r = np.empty(R)
    dummy = np.empty(0)
    for a in range(R):
        m[a], r[a] = _init_frame(rng, init_mode, 0, d, m0, dummy, dummy)
    zs = np.empty(L)
    xi = np.empty(L)
    H = np.empty((L, max(tkmax, 1) + 1))
    sqL = math.sqrt(L)
    rec = -1
    n = 0
    t = 0
    loss = np.nan
    if _mnorm(m) >= eta:
        rec = 0
    while True:
        stopping = stop_mode == STOP_RECOVERY and rec >= 0
        if t % stride == 0 or stopping or t == T or t == rec:
            steps[n] = t
            for a in range(R):
                ms[n, a] = m[a]
            ls[n] = loss
            n += 1
        if stopping or t == T:
            break
        u = 0.0
        for i in range(L):
            zs[i] = rng.standard_normal()
            xi[i] = rng.standard_normal()
            a = 0 if tied else i
            u += m[a] * zs[i] + r[a] * xi[i]
        u /= sqL
        y = _hermite_target(zs, tcoef, tdeg, tkmax, H)
        f, df = _act(acode, acoef, u)
        loss = (f - y) * (f - y)
        bb = 2.0 * (f - y) * df / sqL
        if tied:
            gm = 0.0
            gu = 0.0
            for i in range(L):
                gm += zs[i]
                gu += xi[i]
            go = abs(bb) * math.sqrt(L * rng.chisquare(d - 2.0))
            mm = m[0] - lr * bb * gm / d
            ru = r[0] - lr * bb * gu / d
            ro = lr * go / d
            r2 = ru * ru + ro * ro
            tot = math.sqrt(mm * mm + r2)
            if not (tot > 0.0) or not math.isfinite(tot):
                return steps, ms, ls, -(n + 1), rec, t, m, r
            m[0] = mm / tot
            r[0] = math.sqrt(r2) / tot
        else:
            for i in range(L):
                go = abs(bb) * math.sqrt(rng.chisquare(d - 2.0))
                mm = m[i] - lr * bb * zs[i] / d
                ru = r[i] - lr * bb * xi[i] / d
                ro = lr * go / d
                r2 = ru * ru + ro * ro
                tot = math.sqrt(mm * mm + r2)
                if not (tot > 0.0) or not math.isfinite(tot):
                    return steps, ms, ls, -(n + 1), rec, t, m, r
                m[i] = mm / tot
                r[i] = math.sqrt(r2) / tot
        t += 1
        if rec < 0 and _mnorm(m) >= eta:
            rec = t
    return steps, ms, ls, n, rec, t, m, r


@njit(cache=True)
def _mnorm(m):
    s = 0.0
    for a in range(m.size):
        s += m[a] * m[a]
    return math.sqrt(s / m.size)
