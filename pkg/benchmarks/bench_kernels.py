"""Numba kernels against the numpy fallback.

Part one times each kernel from both backends in one process on shapes taken
from the default config (batch 32, length 32, width 64, 4 heads). Part two
times a classifier forward/backward step in two subprocesses, one with
``DFKA_DISABLE_NUMBA=1``, so the switch is exercised the way users flip it.

    python3 benchmarks/bench_kernels.py [--repeats 50]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dfka._kernels import _numba, _numpy

STEP = """
import time, numpy as np
from dfka import tensor as T
from dfka._kernels import BACKEND
from dfka.models import Classifier, ModelSpec
from dfka.tensor import Rng
m = Classifier(ModelSpec(vocab_size=64, max_len=33, n_layers=4, d_model=64, n_heads=4, n_classes=4), Rng(0))
x = np.random.default_rng(0).integers(3, 64, size=(32, 32))
def step():
    _, logits, _ = m.forward(x)
    T.cross_entropy(logits, np.zeros(32, dtype=np.int64)).backward()
step()
t0 = time.perf_counter()
for _ in range({n}):
    step()
print(BACKEND, (time.perf_counter() - t0) / {n})
"""


def cases(rng, dtype):
    x = rng.normal(size=(32 * 32, 64)).astype(dtype)
    gain, bias = np.ones(64, dtype), np.zeros(64, dtype)
    y, xhat, rstd = _numpy.layer_norm_fwd(x, gain, bias, dtype(1e-5))
    att = rng.normal(size=(32 * 4 * 32, 32)).astype(dtype)  # attention rows
    sm = _numpy.softmax_fwd(att)
    chol = np.linalg.cholesky(np.cov(rng.normal(size=(64, 500))) + np.eye(64)).astype(np.float64)
    diffs = rng.normal(size=(600, 64))
    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(x, gain, bias, dtype(1e-5)),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(x, xhat, rstd, gain),
        "gelu_fwd": lambda k: k.gelu_fwd(x),
        "gelu_bwd": lambda k: k.gelu_bwd(x, x),
        "softmax_fwd": lambda k: k.softmax_fwd(att),
        "softmax_bwd": lambda k: k.softmax_bwd(sm, att),
        "chol_sq_norms": lambda k: k.chol_sq_norms(chol, diffs),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}  max |diff|")
    for name, call in cases(rng, np.float32).items():
        a, b = call(_numpy), call(_numba)  # the first numba call compiles
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(np.asarray(u, float) - np.asarray(v, float)))) for u, v in zip(a, b))
        t_np = min(timeit.repeat(lambda: call(_numpy), number=1, repeat=args.repeats)) * 1e3
        t_nb = min(timeit.repeat(lambda: call(_numba), number=1, repeat=args.repeats)) * 1e3
        print(f"{name:<16} {t_np:9.3f} {t_nb:9.3f} {t_np / t_nb:7.2f}x  {diff:.1e}")

    print("\nclassifier forward+backward, batch 32 x 32 tokens, 4 layers, width 64")
    for disable in ("1", "0"):
        env = {**os.environ, "DFKA_DISABLE_NUMBA": disable}
        out = subprocess.run([sys.executable, "-c", STEP.format(n=args.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"{out[0]:<8} {1e3 * float(out[1]):8.1f} ms/step")


if __name__ == "__main__":
    main()
