"""Pure-numpy reference kernels.

All row-wise kernels operate on the last axis of a 2-D array.
"""
import numpy as np
from scipy.linalg import solve_triangular

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd(gy, xhat, rstd, gain):
    gxhat = gy * gain
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x):
    inner = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, gy):
    inner = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(inner)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * d


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def chol_sq_norms(chol, diffs):
    """Squared norms of ``chol^-1 @ d`` for each row ``d`` of ``diffs``."""
    z = solve_triangular(chol, diffs.T, lower=True, check_finite=False)
    return (z * z).sum(axis=0)
