"""Fused array kernels with numba and numpy implementations.

All kernels take contiguous 2-D `[rows, d]` arrays (callers reshape) and
work for float32 and float64. Reductions accumulate in float64 on both
paths so the backends agree to rounding noise; each path is individually
deterministic.
"""

import math

import numpy as np

from .backend import use_numba

# ---------------------------------------------------------------- numpy path


def _ln_forward_np(x, gamma, beta, eps):
    mean = x.mean(axis=1, dtype=np.float64)
    var = np.square(x - mean[:, None]).mean(axis=1, dtype=np.float64)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gamma + beta
    return y.astype(x.dtype), mean.astype(x.dtype), rstd.astype(x.dtype)


def _ln_backward_np(g, x, gamma, mean, rstd):
    xhat = (x - mean[:, None].astype(x.dtype)) * rstd[:, None].astype(x.dtype)
    dxhat = g * gamma
    a = dxhat.mean(axis=1, dtype=np.float64)[:, None]
    b = (dxhat * xhat).mean(axis=1, dtype=np.float64)[:, None]
    dx = ((dxhat - a - xhat * b) * rstd[:, None]).astype(x.dtype)
    dgamma = (g * xhat).sum(axis=0, dtype=np.float64).astype(x.dtype)
    dbeta = g.sum(axis=0, dtype=np.float64).astype(x.dtype)
    return dx, dgamma, dbeta


def _softmax_forward_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)


def _softmax_backward_np(g, y):
    s = (g * y).sum(axis=1, keepdims=True, dtype=np.float64)
    return (y * (g - s)).astype(y.dtype)


def _log_softmax_forward_np(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True, dtype=np.float64))
    return (z - lse).astype(x.dtype)


def _log_softmax_backward_np(g, y):
    s = g.sum(axis=1, keepdims=True, dtype=np.float64)
    return (g - np.exp(y) * s).astype(y.dtype)


def _adam_update_np(p, g, m, v, t, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------- numba path

if use_numba():
    from numba import njit

    @njit(cache=True)
    def _ln_forward_nb(x, gamma, beta, eps):
        rows, d = x.shape
        y = np.empty_like(x)
        mean = np.empty(rows, dtype=x.dtype)
        rstd = np.empty(rows, dtype=x.dtype)
        for i in range(rows):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            s2 = 0.0
            for j in range(d):
                t = x[i, j] - mu
                s2 += t * t
            r = 1.0 / math.sqrt(s2 / d + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
        return y, mean, rstd

    @njit(cache=True)
    def _ln_backward_nb(g, x, gamma, mean, rstd):
        rows, d = x.shape
        dx = np.empty_like(x)
        dgamma = np.zeros(d, dtype=x.dtype)
        dbeta = np.zeros(d, dtype=x.dtype)
        for i in range(rows):
            a = 0.0
            b = 0.0
            for j in range(d):
                xh = (x[i, j] - mean[i]) * rstd[i]
                dxh = g[i, j] * gamma[j]
                a += dxh
                b += dxh * xh
                dgamma[j] += g[i, j] * xh
                dbeta[j] += g[i, j]
            a /= d
            b /= d
            for j in range(d):
                xh = (x[i, j] - mean[i]) * rstd[i]
                dx[i, j] = (g[i, j] * gamma[j] - a - xh * b) * rstd[i]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _softmax_forward_nb(x):
        rows, d = x.shape
        y = np.empty_like(x)
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - m)
                y[i, j] = e
                s += e
            for j in range(d):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def _softmax_backward_nb(g, y):
        rows, d = y.shape
        dx = np.empty_like(y)
        for i in range(rows):
            s = 0.0
            for j in range(d):
                s += g[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (g[i, j] - s)
        return dx

    @njit(cache=True)
    def _log_softmax_forward_nb(x):
        rows, d = x.shape
        y = np.empty_like(x)
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                s += math.exp(x[i, j] - m)
            lse = math.log(s)
            for j in range(d):
                y[i, j] = x[i, j] - m - lse
        return y

    @njit(cache=True)
    def _log_softmax_backward_nb(g, y):
        rows, d = y.shape
        dx = np.empty_like(y)
        for i in range(rows):
            s = 0.0
            for j in range(d):
                s += g[i, j]
            for j in range(d):
                dx[i, j] = g[i, j] - math.exp(y[i, j]) * s
        return dx

    @njit(cache=True)
    def _adam_update_nb(p, g, m, v, t, lr, beta1, beta2, eps):
        n = p.size
        pf = p.reshape(n)
        gf = g.reshape(n)
        mf = m.reshape(n)
        vf = v.reshape(n)
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(n):
            mf[i] = beta1 * mf[i] + (1.0 - beta1) * gf[i]
            vf[i] = beta2 * vf[i] + (1.0 - beta2) * gf[i] * gf[i]
            pf[i] -= lr * (mf[i] / c1) / (math.sqrt(vf[i] / c2) + eps)


# ---------------------------------------------------------------- dispatch

if use_numba():
    layer_norm_forward = _ln_forward_nb
    layer_norm_backward = _ln_backward_nb
    softmax_forward = _softmax_forward_nb
    softmax_backward = _softmax_backward_nb
    log_softmax_forward = _log_softmax_forward_nb
    log_softmax_backward = _log_softmax_backward_nb
    adam_update = _adam_update_nb
else:
    layer_norm_forward = _ln_forward_np
    layer_norm_backward = _ln_backward_np
    softmax_forward = _softmax_forward_np
    softmax_backward = _softmax_backward_np
    log_softmax_forward = _log_softmax_forward_np
    log_softmax_backward = _log_softmax_backward_np
    adam_update = _adam_update_np

NUMPY_KERNELS = {
    "layer_norm_forward": _ln_forward_np,
    "layer_norm_backward": _ln_backward_np,
    "softmax_forward": _softmax_forward_np,
    "softmax_backward": _softmax_backward_np,
    "log_softmax_forward": _log_softmax_forward_np,
    "log_softmax_backward": _log_softmax_backward_np,
    "adam_update": _adam_update_np,
}
