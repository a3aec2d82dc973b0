"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``DFKA_DISABLE_NUMBA=1`` before import to force the numpy path. The
active backend name is exposed as ``BACKEND``. Kernels in ``NUMPY_PREFERRED``
measured faster in numpy on one core (vectorised float32 tanh/exp, BLAS
triangular solves; see ``benchmarks/bench_kernels.py``) and use it either way.
"""
import os

import numpy as np

from . import _numpy

_disabled = os.environ.get("DFKA_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

NUMPY_PREFERRED = frozenset({"gelu_fwd", "gelu_bwd", "softmax_fwd", "chol_sq_norms"})

_impl = _numpy
BACKEND = "numpy"
if not _disabled:
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is optional at runtime
        pass


def _pick(name):
    return getattr(_numpy if name in NUMPY_PREFERRED else _impl, name)


def _c(a):
    return np.ascontiguousarray(a)


def layer_norm_fwd(x, gain, bias, eps):
    return _pick("layer_norm_fwd")(_c(x), _c(gain), _c(bias), x.dtype.type(eps))


def layer_norm_bwd(gy, xhat, rstd, gain):
    return _pick("layer_norm_bwd")(_c(gy), _c(xhat), _c(rstd), _c(gain))


def gelu_fwd(x):
    return _pick("gelu_fwd")(_c(x))


def gelu_bwd(x, gy):
    return _pick("gelu_bwd")(_c(x), _c(gy))


def softmax_fwd(x):
    return _pick("softmax_fwd")(_c(x))


def softmax_bwd(y, gy):
    return _pick("softmax_bwd")(_c(y), _c(gy))


def chol_sq_norms(chol, diffs):
    return _pick("chol_sq_norms")(_c(chol), _c(diffs))


__all__ = [
    "BACKEND",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "chol_sq_norms",
]
