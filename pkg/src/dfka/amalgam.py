"""Block-wise amalgamation of several frozen teachers into one student.

Each teacher's layers are cut into ``B`` contiguous blocks. A block vector
(mean of its pooled layer states) is enriched with the teacher's confidence,
``z = f(h) + g(C)``, and the ``K`` enriched vectors are fused with a learnable
query token by one transformer layer; the query's output is the block target
for the student's projected block representation. The output loss distils a
confidence-weighted mixture of the teachers' union-space distributions.
"""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import LabelAssignment
from .models import Block, Linear, Module, _param
from .tensor import Rng, Tensor

VARIANTS = ("st", "mul", "noST")


def partition(n_layers: int, n_blocks: int) -> list[range]:
    """Contiguous 0-based layer ranges; the first ``n_layers % n_blocks`` blocks are one longer."""
    if n_blocks < 1 or n_layers < n_blocks:
        raise ValueError(f"cannot split {n_layers} layers into {n_blocks} blocks")
    q, r = divmod(n_layers, n_blocks)
    out, start = [], 0
    for b in range(n_blocks):
        size = q + (1 if b < r else 0)
        out.append(range(start, start + size))
        start += size
    return out


def block_reps(layer_reps: np.ndarray, n_blocks: int) -> np.ndarray:
    """``(n, L, d)`` pooled layer vectors to ``(n, B, d)`` block vectors."""
    parts = partition(layer_reps.shape[1], n_blocks)
    return np.stack([layer_reps[:, p.start:p.stop].mean(axis=1) for p in parts], axis=1)


# ---------------------------------------------------------------------------
# the amalgamation network


@dataclasses.dataclass(frozen=True)
class AmalgamConfig:
    variant: str = "st"
    share_blocks: bool = False
    n_heads: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


class AmalgamNet(Module):
    """Target-side maps ``f``, ``g``, the query token, the fuser and the student projections."""

    def __init__(self, teacher_dims: Sequence[int], n_blocks: int, d_student: int, rng: Rng,
                 cfg: AmalgamConfig = AmalgamConfig()):
        if len(teacher_dims) == 0:
            raise ValueError("need at least one teacher")
        self.cfg = cfg
        self.teacher_dims = list(teacher_dims)
        self.n_blocks = n_blocks
        self.d_a = d = d_student
        n_maps = 1 if cfg.share_blocks else n_blocks
        self.f = [[Linear(di, d, rng.child("f", i, b)) for b in range(n_maps)]
                  for i, di in enumerate(teacher_dims)]
        self.g = [[Linear(1, d, rng.child("g", i, b)) for b in range(n_maps)]
                  for i in range(len(teacher_dims))]
        self.proj = [Linear(d_student, d, rng.child("proj", b)) for b in range(n_blocks)]
        if cfg.variant == "noST":
            self.mix = Linear(d, d, rng.child("mix"))
        else:
            self.e_amalg = _param(rng.child("amalg").normal(0.0, 0.02, size=(d,)))
            self.fuser = Block(d, cfg.n_heads, rng.child("fuser"))

    @property
    def k(self) -> int:
        return len(self.teacher_dims)

    def _maps(self, i: int, b: int) -> tuple[Linear, Linear]:
        j = 0 if self.cfg.share_blocks else b
        return self.f[i][j], self.g[i][j]

    def enrich(self, i: int, b: int, h, conf) -> Tensor:
        """``f(h) + g(C)`` (or ``C * f(h)`` for the multiplicative variant); ``h`` is ``(n, d_i)``."""
        f, g = self._maps(i, b)
        h = T.as_tensor(np.asarray(h, dtype=T.get_dtype()) if not isinstance(h, Tensor) else h)
        c = np.asarray(conf, dtype=T.get_dtype()).reshape(-1, 1)
        if self.cfg.variant == "mul":
            return f(h) * c
        return f(h) + g(T.Tensor(c))

    def fuse(self, zs: Sequence[Tensor]) -> Tensor:
        """Fuse ``K`` tensors ``(n, d_a)`` through the query token; returns ``(n, d_a)``."""
        if len(zs) == 0:
            raise ValueError("empty teacher list")
        n = zs[0].shape[0]
        query = T.expand(self.e_amalg, (n, 1, self.d_a))
        seq = T.concat([query] + [T.reshape(z, (n, 1, self.d_a)) for z in zs], axis=1)
        out = self.fuser(seq)
        return T.reshape(T.getitem(out, (slice(None), 0)), (n, self.d_a))

    def block_target(self, b: int, feats: Sequence[np.ndarray], confs: Sequence[np.ndarray]) -> Tensor:
        """Amalgamated target for block ``b`` from per-teacher ``(n, B, d_i)`` feats and ``(n, B)`` confidences."""
        zs = [self.enrich(i, b, feats[i][:, b], confs[i][:, b]) for i in range(self.k)]
        if self.cfg.variant == "noST":
            w = _softmax_rows(np.stack([c[:, b] for c in confs], axis=1))
            acc = None
            for i, z in enumerate(zs):
                term = z * w[:, i:i + 1].astype(T.get_dtype())
                acc = term if acc is None else acc + term
            return self.mix(acc)
        return self.fuse(zs)

    def targets(self, feats, confs) -> list[Tensor]:
        if len(feats) != self.k or len(confs) != self.k:
            raise ValueError(f"expected {self.k} teachers")
        return [self.block_target(b, feats, confs) for b in range(self.n_blocks)]

    def projection_parameters(self) -> list[Tensor]:
        return [p for lin in self.proj for p in lin.parameters()]

    def project(self, student_blocks: Sequence[Tensor]) -> list[Tensor]:
        if len(student_blocks) != self.n_blocks:
            raise ValueError(f"expected {self.n_blocks} student blocks, got {len(student_blocks)}")
        return [p(h) for p, h in zip(self.proj, student_blocks)]


def st_amalg(net: AmalgamNet, zs: Sequence[Tensor]) -> Tensor:
    return net.fuse(zs)


# ---------------------------------------------------------------------------
# losses


def unit_rows(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each row of ``(n, d)`` to unit L2 norm."""
    norm = T.power(T.tsum(x * x, axis=-1, keepdims=True) + eps, 0.5)
    return x / norm


def amal_loss(projected: Sequence[Tensor], targets: Sequence[Tensor]) -> Tensor:
    """Sum over blocks of the batch-mean squared L2 distance."""
    if len(projected) != len(targets):
        raise ValueError("block count mismatch")
    if len(projected) == 0:
        raise ValueError("no blocks")
    total = None
    for p, z in zip(projected, targets):
        sq = T.tsum((p - z) ** 2, axis=-1)
        term = T.mean(sq)
        total = term if total is None else total + term
    return total


def _softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def teacher_weights(final_confs: np.ndarray) -> np.ndarray:
    """Softmax over teachers of standardised confidences; ``(n, K)``."""
    w = _softmax_rows(np.atleast_2d(final_confs))
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("teacher weights do not sum to 1")
    return w


def embed_union(probs: np.ndarray, union_index: np.ndarray, n_union: int) -> np.ndarray:
    """Place a teacher's ``(n, c_i)`` distribution into union space with zeros elsewhere."""
    out = np.zeros((probs.shape[0], n_union))
    out[:, union_index] = probs
    return out


def union_mixture(teacher_logits: Sequence[np.ndarray], weights: np.ndarray,
                  assignment: LabelAssignment, tau: float) -> np.ndarray:
    """Confidence-weighted mixture of the teachers' tempered distributions in union space."""
    weights = np.atleast_2d(weights)
    if np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("teacher weights do not sum to 1")
    if weights.shape[1] != len(teacher_logits):
        raise ValueError("one weight column per teacher")
    mix = np.zeros((weights.shape[0], assignment.n_union))
    for i, lg in enumerate(teacher_logits):
        p = _softmax_rows(lg, tau)
        mix += weights[:, i:i + 1] * embed_union(p, assignment.union_index(i), assignment.n_union)
    return mix


def out_loss(teacher_logits: Sequence[np.ndarray], final_confs: np.ndarray, student_logits,
             assignment: LabelAssignment, tau: float) -> Tensor:
    """``KL(T_hat || softmax(s / tau)) * tau^2`` averaged over the batch."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    target = union_mixture(teacher_logits, teacher_weights(final_confs), assignment, tau)
    return distill_loss(target, student_logits, tau)


def distill_loss(target: np.ndarray, student_logits, tau: float) -> Tensor:
    target = np.asarray(target, dtype=T.as_tensor(student_logits).dtype)
    return T.kl_to_logits(target, student_logits, tau) * (tau * tau)


def total_loss(amal, out, lam: float):
    """Convex combination ``lam * amal + (1 - lam) * out``; accepts tensors or floats."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if lam == 1.0:
        return amal
    if lam == 0.0:
        return out
    return amal * lam + out * (1.0 - lam)


# ---------------------------------------------------------------------------
# baselines


def ensemble_logits(teacher_logits: Sequence[np.ndarray], assignment: LabelAssignment) -> np.ndarray:
    """Concatenate teacher logits into union order; labels shared by several teachers are averaged."""
    n = teacher_logits[0].shape[0]
    acc = np.zeros((n, assignment.n_union))
    count = np.zeros(assignment.n_union)
    for i, lg in enumerate(teacher_logits):
        idx = assignment.union_index(i)
        acc[:, idx] += lg
        count[idx] += 1
    if np.any(count == 0):
        raise ValueError("some union labels have no teacher")
    return acc / count


def teacher_only_probs(logits: np.ndarray, assignment: LabelAssignment, i: int) -> np.ndarray:
    return embed_union(_softmax_rows(logits), assignment.union_index(i), assignment.n_union)
