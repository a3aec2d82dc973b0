"""Small reverse-mode autodiff on top of numpy.

A :class:`Tensor` wraps an ndarray and remembers how it was produced. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on every reachable tensor that requires grad.
Gradients accumulate across backward calls until :func:`zero_grad` is called.

Broadcasting is deliberately narrow: the smaller operand may either be a
suffix of the larger shape (missing leading dims) or match it on a prefix and
carry only size-1 trailing dims. Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
import math
import zlib
from typing import Iterable, Sequence

import numpy as np

from . import _kernels

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# precision / grad mode


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    _DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype (``"float32"``/``"float64"``)."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    # basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # graph construction
    @staticmethod
    def _make(data, parents, backward, check=False) -> "Tensor":
        if check and not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite value in forward output")
        out = Tensor(data)
        if _GRAD_ENABLED:
            live = tuple(p for p in parents if p.requires_grad)
            if live:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``.

        Without an explicit seed ``grad`` the tensor must be a finite scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            if not np.isfinite(self.data).all():
                raise NonFiniteError("loss is not finite")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=True, name=name)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE))


# ---------------------------------------------------------------------------
# broadcasting helpers


def check_broadcast(a: tuple, b: tuple) -> tuple:
    """Return the output shape for an elementwise op or raise ShapeError."""
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return big
    if len(a) == len(b):
        i = 0
        while i < len(a) and a[i] == b[i]:
            i += 1
        if all(s == 1 for s in a[i:]):
            return b
        if all(s == 1 for s in b[i:]):
            return a
    raise ShapeError(f"incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b):
    # plain numbers adopt the tensor operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a, b = as_tensor(a), as_tensor(b)
    check_broadcast(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return Tensor._make(a.data * b.data, (a, b),
                        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._make(out, (a, b), bw, check=True)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), check=True)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), check=True)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return Tensor._make(out, (a,), lambda g: (g / a.data,), check=True)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    out = _kernels.gelu_fwd(a.data)
    return Tensor._make(out, (a,), lambda g: (_kernels.gelu_bwd(a.data, g),))


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where the constant ``mask`` is true (numpy broadcast on mask)."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return Tensor._make(out, (a,), lambda g: (np.where(mask, 0, g),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def expand(a, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` under the same narrow rules as elementwise ops."""
    a = as_tensor(a)
    shape = tuple(shape)
    if check_broadcast(a.shape, shape) != shape:
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor._make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty list")
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if k != axis
        ):
            raise ShapeError(f"concat shape mismatch {t.shape} vs {ts[0].shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(ts), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of empty list")
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise ShapeError("stack requires equal shapes")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return Tensor._make(out, tuple(ts), bw)


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)`` with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return Tensor._make(out, (weight,), bw)


def masked_mean(x, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``x`` (B, T, d) restricted to positions where ``mask`` (B, T) is true."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} does not match {x.shape[:2]}")
    count = m.sum(axis=1, keepdims=True)
    if np.any(count == 0):
        raise ValueError("masked_mean over an empty row")
    w = (m / count)[..., None]
    out = (x.data * w).sum(axis=1)
    return Tensor._make(out, (x,), lambda g: (g[:, None, :] * w,))


# ---------------------------------------------------------------------------
# normalisation / probability


def _lastaxis(fn, x, axis):
    moved = np.moveaxis(x, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    return np.moveaxis(fn(flat).reshape(moved.shape), -1, axis)


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax input is not finite")
    axis = axis % x.ndim
    z = x.data / temperature if temperature != 1.0 else x.data
    out = _lastaxis(_kernels.softmax_fwd, z, axis)

    def bw(g):
        moved_y = np.moveaxis(out, axis, -1)
        moved_g = np.moveaxis(g, axis, -1)
        gx = _kernels.softmax_bwd(moved_y.reshape(-1, moved_y.shape[-1]),
                                  moved_g.reshape(-1, moved_g.shape[-1]))
        gx = np.moveaxis(gx.reshape(moved_y.shape), -1, axis)
        return (gx / temperature if temperature != 1.0 else gx,)

    return Tensor._make(out, (x,), bw)


def log_softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = x.data / temperature
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return ((g - sm * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._make(out, (x,), bw, check=True)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)")
    flat = x.data.reshape(-1, d)
    y, xhat, rstd = _kernels.layer_norm_fwd(flat, gain.data, bias.data, eps)

    def bw(g):
        gx, gg, gb = _kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gain.data)
        return gx.reshape(x.shape), gg.astype(gain.dtype), gb.astype(bias.dtype)

    return Tensor._make(y.reshape(x.shape), (x, gain, bias), bw)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    labels = np.asarray(labels)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return -mean(picked)


def _check_rows(p: np.ndarray, name: str, tol: float = 1e-6) -> None:
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        raise ValueError(f"{name} rows are not normalised (max error {np.abs(s - 1).max():.2e})")


def kl_divergence(p, q) -> Tensor:
    """Batch-mean KL(p || q) over the last axis, with 0 * log 0 = 0."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    _check_rows(p.data, "p")
    _check_rows(q.data, "q")
    if np.any(q.data <= 0):
        raise ValueError("q must be strictly positive")
    pos = p.data > 0
    safe_p = np.where(pos, p.data, 1.0)
    terms = np.where(pos, p.data * (np.log(safe_p) - np.log(q.data)), 0.0)
    rows = int(np.prod(p.shape[:-1])) if p.ndim > 1 else 1
    out = np.asarray(terms.sum() / rows, dtype=p.dtype)

    def bw(g):
        gp = np.where(pos, np.log(safe_p) - np.log(q.data) + 1.0, 0.0) * (g / rows)
        gq = -p.data / q.data * (g / rows)
        return gp.astype(p.dtype), gq.astype(q.dtype)

    return Tensor._make(out, (p, q), bw, check=True)


def kl_to_logits(target: np.ndarray, logits, temperature: float = 1.0) -> Tensor:
    """Batch-mean KL(target || softmax(logits / T)), computed through log_softmax."""
    target = np.asarray(target)
    logits = as_tensor(logits)
    if target.shape != logits.shape:
        raise ShapeError(f"target {target.shape} vs logits {logits.shape}")
    _check_rows(target, "target")
    pos = target > 0
    ent = float(np.where(pos, target * np.log(np.where(pos, target, 1.0)), 0.0).sum())
    lq = log_softmax(logits, axis=-1, temperature=temperature)
    rows = target.shape[0]
    cross = tsum(mul(Tensor(target.astype(logits.dtype)), lq)) * (1.0 / rows)
    return add(-cross, ent / rows)


# ---------------------------------------------------------------------------
# optimisation


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


class AdamW:
    """Decoupled weight-decay Adam. ``step`` reads ``p.grad`` and updates ``p.data`` in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def linear_schedule(step: int, total: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    rest = max(total - warmup, 1)
    return base_lr * max(0.0, (total - step) / rest)


# ---------------------------------------------------------------------------
# randomness


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


class Rng:
    """Seeded random stream; ``child(*keys)`` derives independent reproducible substreams."""

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_int(k) for k in keys))

    # thin pass-throughs
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.gen.permutation(x)

    def dirichlet(self, alpha, size=None):
        return self.gen.dirichlet(alpha, size)

    def random(self, size=None):
        return self.gen.random(size)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(fn, param: Tensor, indices: Iterable[tuple], eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. selected entries of ``param``."""
    out = []
    for idx in indices:
        old = param.data[idx].copy()
        param.data[idx] = old + eps
        fp = float(fn().data)
        param.data[idx] = old - eps
        fm = float(fn().data)
        param.data[idx] = old
        out.append((fp - fm) / (2 * eps))
    return np.array(out)


def grad_check(fn, params: dict, max_entries: int = 1000, eps: float = 1e-4,
               rng: Rng | None = None, floor: float = 1e-6) -> dict:
    """Compare analytic and finite-difference gradients.

    ``fn`` rebuilds the scalar loss from scratch. Entries are subsampled
    evenly across ``params`` up to ``max_entries`` in total. Returns, per
    parameter name, the max relative error ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng or Rng(0)
    items = [(k, p) for k, p in params.items()]
    zero_grad(p for _, p in items)
    loss = fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in items}
    per = max(1, max_entries // max(len(items), 1))
    report = {}
    for k, p in items:
        n = p.data.size
        flat = rng.choice(n, size=min(per, n), replace=False)
        idxs = [np.unravel_index(int(i), p.shape) for i in flat]
        num = numeric_grad(fn, p, idxs, eps)
        ana = np.array([analytic[k][i] for i in idxs])
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        report[k] = float(np.max(np.abs(ana - num) / denom))
    zero_grad(p for _, p in items)
    return report
