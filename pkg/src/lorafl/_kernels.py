"""Hot loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``LORAFL_DISABLE_NUMBA`` is unset (or "0"). Both paths implement
the same algorithms in the same operation order; the numpy fallback
vectorizes the innermost loops, so floating-point results agree to
rounding but are not guaranteed bitwise identical.
"""

import os

import numpy as np

_DISABLED = os.environ.get("LORAFL_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("disabled by LORAFL_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def backend():
    return "numba" if NUMBA_AVAILABLE else "numpy"


# --------------------------------------------------------------------------
# One-sided Jacobi sweeps
# --------------------------------------------------------------------------


def _jacobi_numpy(G, V, tol, max_sweeps):
    n = G.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = G[:, p]
                gq = G[:, q]
                alpha = gp @ gp
                beta = gq @ gq
                gamma = gp @ gq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * gp - s * gq
                G[:, q] = s * gp + c * gq
                G[:, p] = new_p
                vp = V[:, p].copy()
                vq = V[:, q]
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return max_sweeps


@njit(cache=True)
def _jacobi_numba(G, V, tol, max_sweeps):
    m, n = G.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    a = G[i, p]
                    b = G[i, q]
                    alpha += a * a
                    beta += b * b
                    gamma += a * b
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    a = G[i, p]
                    b = G[i, q]
                    G[i, p] = c * a - s * b
                    G[i, q] = s * a + c * b
                for i in range(n):
                    a = V[i, p]
                    b = V[i, q]
                    V[i, p] = c * a - s * b
                    V[i, q] = s * a + c * b
        if not rotated:
            return sweep + 1
    return max_sweeps


def jacobi_sweeps(G, V, tol=1e-12, max_sweeps=100):
    """Orthogonalize the columns of ``G`` in place, accumulating rotations in ``V``.

    Returns the number of sweeps performed.
    """
    if NUMBA_AVAILABLE:
        return int(_jacobi_numba(G, V, float(tol), int(max_sweeps)))
    return _jacobi_numpy(G, V, tol, max_sweeps)


# --------------------------------------------------------------------------
# Compensated row summation
# --------------------------------------------------------------------------


def _neumaier_numpy(rows):
    total = rows[0].copy()
    comp = np.zeros_like(total)
    for k in range(1, rows.shape[0]):
        x = rows[k]
        t = total + x
        big = np.abs(total) >= np.abs(x)
        comp += np.where(big, (total - t) + x, (x - t) + total)
        total = t
    return total + comp


@njit(cache=True)
def _neumaier_numba(rows):
    k, d = rows.shape
    out = np.empty(d)
    for j in range(d):
        total = rows[0, j]
        comp = 0.0
        for i in range(1, k):
            x = rows[i, j]
            t = total + x
            if abs(total) >= abs(x):
                comp += (total - t) + x
            else:
                comp += (x - t) + total
            total = t
        out[j] = total + comp
    return out


def compensated_sum(rows):
    """Neumaier-compensated sum over axis 0 of a 2-D array, in row order."""
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("compensated_sum expects a non-empty 2-D array")
    if NUMBA_AVAILABLE:
        return _neumaier_numba(rows)
    return _neumaier_numpy(rows)


# --------------------------------------------------------------------------
# tanh-approximated GELU, forward value and derivative in one pass
# --------------------------------------------------------------------------

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_K = 0.044715


def _gelu_numpy(x):
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_K * x2 * x))
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x2)
    return y, dy


@njit(cache=True)
def _gelu_pre(flat):
    u = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        u[i] = GELU_C * (v + GELU_K * v * v * v)
    return u


@njit(cache=True)
def _gelu_post(flat, t):
    y = np.empty_like(flat)
    dy = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        ti = t[i]
        y[i] = 0.5 * v * (1.0 + ti)
        dy[i] = 0.5 * (1.0 + ti) + 0.5 * v * (1.0 - ti * ti) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
    return y, dy


def gelu(x):
    """Return ``(gelu(x), gelu'(x))`` for a float64 array."""
    if not NUMBA_AVAILABLE:
        return _gelu_numpy(x)
    # numpy's vectorized tanh is much faster than the scalar libm call numba emits
    flat = np.ascontiguousarray(x).reshape(-1)
    t = np.tanh(_gelu_pre(flat))
    y, dy = _gelu_post(flat, t)
    return y.reshape(x.shape), dy.reshape(x.shape)


# --------------------------------------------------------------------------
# Layer norm over the last axis of a 2-D array
# --------------------------------------------------------------------------


def _ln_fwd_numpy(x, g, b, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    xhat = xc * rstd[:, None]
    return xhat * g + b, xhat, rstd


@njit(cache=True)
def _ln_fwd_numba(x, g, b, eps):
    R, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(R)
    for r in range(R):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[r, j] - mu
            var += c * c
        s = 1.0 / np.sqrt(var / d + eps)
        rstd[r] = s
        for j in range(d):
            h = (x[r, j] - mu) * s
            xhat[r, j] = h
            y[r, j] = h * g[j] + b[j]
    return y, xhat, rstd


def layernorm_forward(x, g, b, eps):
    """Normalize rows of ``x``; returns ``(y, xhat, rstd)``."""
    if NUMBA_AVAILABLE:
        return _ln_fwd_numba(np.ascontiguousarray(x), g, b, eps)
    return _ln_fwd_numpy(x, g, b, eps)


def _ln_bwd_numpy(dy, xhat, rstd, g):
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd[:, None] * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dg, db


@njit(cache=True)
def _ln_bwd_numba(dy, xhat, rstd, g):
    R, d = dy.shape
    dx = np.empty_like(dy)
    dg = np.zeros(d)
    db = np.zeros(d)
    for r in range(R):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            v = dy[r, j]
            h = xhat[r, j]
            dg[j] += v * h
            db[j] += v
            gx = v * g[j]
            m1 += gx
            m2 += gx * h
        m1 /= d
        m2 /= d
        s = rstd[r]
        for j in range(d):
            dx[r, j] = s * (dy[r, j] * g[j] - m1 - xhat[r, j] * m2)
    return dx, dg, db


def layernorm_backward(dy, xhat, rstd, g):
    """Return ``(dx, dg, db)`` for :func:`layernorm_forward`."""
    if NUMBA_AVAILABLE:
        return _ln_bwd_numba(np.ascontiguousarray(dy), xhat, rstd, g)
    return _ln_bwd_numpy(dy, xhat, rstd, g)


# --------------------------------------------------------------------------
# Row softmax and its backward
# --------------------------------------------------------------------------


def _softmax_numpy(s):
    p = s - s.max(axis=1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=1, keepdims=True)
    return p


@njit(cache=True)
def _shift_rows(s):
    R, n = s.shape
    out = np.empty_like(s)
    for r in range(R):
        mx = s[r, 0]
        for j in range(1, n):
            if s[r, j] > mx:
                mx = s[r, j]
        for j in range(n):
            out[r, j] = s[r, j] - mx
    return out


@njit(cache=True)
def _normalize_rows(e):
    R, n = e.shape
    for r in range(R):
        tot = 0.0
        for j in range(n):
            tot += e[r, j]
        for j in range(n):
            e[r, j] /= tot
    return e


def softmax_rows(s):
    if NUMBA_AVAILABLE:
        e = _shift_rows(np.ascontiguousarray(s))
        np.exp(e, out=e)
        return _normalize_rows(e)
    return _softmax_numpy(s)


def _softmax_bwd_numpy(p, dp):
    return p * (dp - (dp * p).sum(axis=1, keepdims=True))


@njit(cache=True)
def _softmax_bwd_numba(p, dp):
    R, n = p.shape
    ds = np.empty_like(p)
    for r in range(R):
        dot = 0.0
        for j in range(n):
            dot += dp[r, j] * p[r, j]
        for j in range(n):
            ds[r, j] = p[r, j] * (dp[r, j] - dot)
    return ds


def softmax_rows_backward(p, dp):
    """Gradient w.r.t. the logits of :func:`softmax_rows` given ``dL/dp``."""
    if NUMBA_AVAILABLE:
        return _softmax_bwd_numba(p, np.ascontiguousarray(dp))
    return _softmax_bwd_numpy(p, dp)
