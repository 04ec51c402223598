"""Hot numeric kernels.

Every kernel has a pure-numpy implementation (``*_np``) and, when numba is
importable, an ``@njit`` twin (``*_nb``). The public names are bound once at
import time. Set ``OUTFITREC_NUMBA=0`` to force the numpy path.

All kernels operate on 2-D C-contiguous views whose last axis is the one being
reduced; callers reshape before and after.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_flag = os.environ.get("OUTFITREC_NUMBA", "1").strip().lower()
NUMBA_AVAILABLE = numba is not None
NUMBA_ENABLED = NUMBA_AVAILABLE and _flag not in ("0", "false", "no", "off")

_JIT_OPTS = dict(cache=True, nogil=True, fastmath=False, error_model="numpy")


# ---------------------------------------------------------------- numpy path

def softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_rows_np(x, mask):
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd_np(g, xhat, rstd, gain):
    gx = g * gain
    d = xhat.shape[1]
    dx = (gx - gx.sum(axis=1, keepdims=True) / d
          - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d) * rstd[:, None]
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def auc_count_np(pos, neg):
    """Number of (pos, neg) pairs with pos > neg, ties counted as 1/2."""
    s = np.sort(neg)
    below = np.searchsorted(s, pos, side="left")
    upto = np.searchsorted(s, pos, side="right")
    return float(below.sum()) + 0.5 * float((upto - below).sum())


# ---------------------------------------------------------------- numba path

if NUMBA_AVAILABLE:

    @numba.njit(**_JIT_OPTS)
    def softmax_rows_nb(x):
        m, n = x.shape
        out = np.empty_like(x)
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(n):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(n):
                out[i, j] /= s
        return out

    @numba.njit(**_JIT_OPTS)
    def masked_softmax_rows_nb(x, mask):
        m, n = x.shape
        out = np.zeros_like(x)
        for i in range(m):
            mx = -np.inf
            for j in range(n):
                if mask[i, j] and x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(n):
                if mask[i, j]:
                    e = np.exp(x[i, j] - mx)
                    out[i, j] = e
                    s += e
            for j in range(n):
                out[i, j] /= s
        return out

    @numba.njit(**_JIT_OPTS)
    def softmax_rows_bwd_nb(y, g):
        m, n = y.shape
        out = np.empty_like(y)
        for i in range(m):
            dot = 0.0
            for j in range(n):
                dot += g[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit(**_JIT_OPTS)
    def layer_norm_fwd_nb(x, gain, bias, eps):
        m, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(m, dtype=x.dtype)
        for i in range(m):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @numba.njit(**_JIT_OPTS)
    def layer_norm_bwd_nb(g, xhat, rstd, gain):
        m, d = g.shape
        dx = np.empty_like(g)
        dgain = np.zeros(d, dtype=g.dtype)
        dbias = np.zeros(d, dtype=g.dtype)
        for i in range(m):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gx = g[i, j] * gain[j]
                s1 += gx
                s2 += gx * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                dx[i, j] = (g[i, j] * gain[j] - s1 - xhat[i, j] * s2) * rstd[i]
        return dx, dgain, dbias

    @numba.njit(**_JIT_OPTS)
    def auc_count_nb(pos, neg):
        total = 0.0
        for a in pos:
            for b in neg:
                if a > b:
                    total += 1.0
                elif a == b:
                    total += 0.5
        return total

if NUMBA_ENABLED:
    softmax_rows = softmax_rows_nb
    masked_softmax_rows = masked_softmax_rows_nb
    softmax_rows_bwd = softmax_rows_bwd_nb
    layer_norm_fwd = layer_norm_fwd_nb
    layer_norm_bwd = layer_norm_bwd_nb
    auc_count = auc_count_nb
else:
    softmax_rows = softmax_rows_np
    masked_softmax_rows = masked_softmax_rows_np
    softmax_rows_bwd = softmax_rows_bwd_np
    layer_norm_fwd = layer_norm_fwd_np
    layer_norm_bwd = layer_norm_bwd_np
    auc_count = auc_count_np


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
