"""Numba-compiled kernels, same signatures as ``_numpy``."""
import math

import numpy as np
from numba import njit

GELU_C = 0.7978845608028654
GELU_A = 0.044715
# fastmath without nnan/ninf: large negative inputs rely on exp overflowing to inf
FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_bwd(gy, xhat, rstd, gain):
    n, d = gy.shape
    gx = np.empty_like(gy)
    ggain = np.zeros(d, dtype=gy.dtype)
    gbias = np.zeros(d, dtype=gy.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = gy[i, j] * gain[j]
            m1 += g
            m2 += g * xhat[i, j]
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
        m1 /= d
        m2 /= d
        r = rstd[i]
        for j in range(d):
            gx[i, j] = r * (gy[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return gx, ggain, gbias


# 0.5 * (1 + tanh(z)) == sigmoid(2z); exp vectorises under fastmath where libm tanh does not,
# and dtype-matched constants keep float32 inputs in float32
@njit(cache=True, fastmath=FAST)
def _gelu_fwd_flat(x, out):
    c = x.dtype.type(2.0 * GELU_C)
    a = x.dtype.type(GELU_A)
    one = x.dtype.type(1.0)
    for i in range(x.size):
        v = x[i]
        out[i] = v / (one + np.exp(-c * (v + a * v * v * v)))


@njit(cache=True, fastmath=FAST)
def _gelu_bwd_flat(x, gy, out):
    c = x.dtype.type(2.0 * GELU_C)
    a = x.dtype.type(GELU_A)
    one = x.dtype.type(1.0)
    three = x.dtype.type(3.0)
    for i in range(x.size):
        v = x[i]
        s = one / (one + np.exp(-c * (v + a * v * v * v)))
        out[i] = gy[i] * (s + v * s * (one - s) * c * (one + three * a * v * v))


def gelu_fwd(x):
    out = np.empty_like(x)
    _gelu_fwd_flat(x.reshape(-1), out.reshape(-1))
    return out


def gelu_bwd(x, gy):
    out = np.empty_like(x)
    _gelu_bwd_flat(x.reshape(-1), np.ascontiguousarray(gy).reshape(-1), out.reshape(-1))
    return out


@njit(cache=True)
def softmax_fwd(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
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
def softmax_bwd(y, gy):
    n, d = y.shape
    gx = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += gy[i, j] * y[i, j]
        for j in range(d):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return gx


@njit(cache=True)
def chol_sq_norms(chol, diffs):
    n, d = diffs.shape
    out = np.empty(n, dtype=diffs.dtype)
    z = np.empty(d, dtype=diffs.dtype)
    for r in range(n):
        acc = 0.0
        for i in range(d):
            s = diffs[r, i]
            for k in range(i):
                s -= chol[i, k] * z[k]
            z[i] = s / chol[i, i]
            acc += z[i] * z[i]
        out[r] = acc
    return out
