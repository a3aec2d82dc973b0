"""Teacher-steered class-conditional decoding over an unconditional LM.

At every step the LM's ``m`` most likely next tokens are kept and each is
rescored by ``P_lm(x) * P_teacher(c | prefix + x) ** gamma``; everything
outside the top ``m`` gets zero mass. The final token is drawn from the top
``k`` (or the nucleus ``top_p``) of that rescored distribution.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import LabelAssignment, write_records, read_records
from .models import BOS, EOS, PAD, CausalLM, Classifier, lm_next_logits
from .tensor import Rng

UNDERFLOW = 1e-30
FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class SteerConfig:
    gamma: float = 2.0
    m: int = 20
    k: int = 10
    top_p: float | None = None
    max_len: int = 32
    min_len: int = 4
    n_samples: int = 300
    heldout_fraction: float = 0.5
    batch_size: int = 128

    def validate(self, vocab_size: int | None = None) -> "SteerConfig":
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.m < 1 or (vocab_size is not None and self.m > vocab_size):
            raise ValueError("m must lie in [1, vocab_size]")
        if self.top_p is None:
            if not 1 <= self.k:
                raise ValueError("k must be >= 1")
            if self.k >= self.m and self.m > 1:
                raise ValueError("need k < m")
        elif not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must lie in (0, 1)")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SteerConfig":
        return cls(**d)


@dataclasses.dataclass
class PseudoSample:
    tokens: np.ndarray
    target: int
    teacher: int
    trace: np.ndarray | None = None


@dataclasses.dataclass
class TransferSet:
    """Pooled student transfer set plus one held-out OOD-fitting set per teacher."""

    train: list[PseudoSample]
    heldout: dict[int, list[PseudoSample]]
    config: SteerConfig

    def union_labels(self, assignment: LabelAssignment) -> np.ndarray:
        return np.array([assignment.subsets[s.teacher][s.target] for s in self.train], dtype=np.int64)


# ---------------------------------------------------------------------------
# core rescoring


def _teacher_probs(teacher: Classifier, rows: np.ndarray) -> np.ndarray:
    with T.no_grad():
        _, logits, _ = teacher.forward(rows)
    return T.softmax(T.Tensor(logits.data.astype(np.float64)), axis=-1).data


def steered_batch(lm: CausalLM, teacher: Classifier, prefixes: np.ndarray, targets: np.ndarray,
                  cfg: SteerConfig, banned: np.ndarray | None = None) -> np.ndarray:
    """Rescored next-token distributions ``(B, V)`` for equal-length prefixes.

    ``targets`` are teacher-local class indices. ``banned`` (bool ``(B, V)``
    or ``(V,)``) zeroes LM mass before the top-m cut.
    """
    targets = np.asarray(targets, dtype=np.int64)
    prefixes = np.asarray(prefixes, dtype=np.int64)
    if prefixes.ndim != 2 or prefixes.shape[0] != len(targets):
        raise ValueError("prefixes must be (B, t) with one row per target")
    B, t = prefixes.shape
    if np.any(targets < 0) or np.any(targets >= teacher.spec.n_classes):
        raise ValueError("target class outside the teacher's label set")
    logits = lm_next_logits(lm, prefixes).astype(np.float64)
    p_lm = T.softmax(T.Tensor(logits), axis=-1).data
    if banned is not None:
        p_lm = np.where(np.broadcast_to(banned, p_lm.shape), 0.0, p_lm)
    V = p_lm.shape[1]
    m = min(cfg.m, V)
    cand = np.argsort(-p_lm, axis=1, kind="stable")[:, :m]
    lm_c = np.take_along_axis(p_lm, cand, axis=1)

    if cfg.gamma == 0:
        teach = np.ones_like(lm_c)
    else:
        ext = np.concatenate([np.repeat(prefixes, m, axis=0), cand.reshape(-1, 1)], axis=1)
        probs = _teacher_probs(teacher, ext).reshape(B, m, -1)
        teach = np.take_along_axis(probs, targets[:, None, None], axis=2)[..., 0]
        # ending the text leaves the prefix itself to be judged
        is_end = cand == EOS
        if is_end.any():
            if t == 0:
                base = np.full(B, 1.0 / teacher.spec.n_classes)
            else:
                base = _teacher_probs(teacher, prefixes)[np.arange(B), targets]
            teach = np.where(is_end, base[:, None], teach)
        teach = teach ** cfg.gamma
    score = lm_c * teach
    dead = np.all(score < UNDERFLOW, axis=1)
    if dead.any():
        score[dead] = lm_c[dead]
    score = score / score.sum(axis=1, keepdims=True)
    out = np.zeros((B, V))
    np.put_along_axis(out, cand, score, axis=1)
    return out


def steered_next_distribution(lm: CausalLM, teacher: Classifier, prefix: Sequence[int], c: int,
                              cfg: SteerConfig, banned: np.ndarray | None = None) -> np.ndarray:
    """Next-token distribution over the vocabulary for a single prefix and target class."""
    if not 0 <= c < teacher.spec.n_classes:
        raise ValueError(f"class {c} is outside the teacher's label set")
    if len(prefix) >= cfg.max_len:
        raise ValueError("prefix already at max_len")
    pre = np.asarray(prefix, dtype=np.int64).reshape(1, -1)
    return steered_batch(lm, teacher, pre, np.array([c]), cfg, banned)[0]


def _truncate(dist: np.ndarray, cfg: SteerConfig) -> np.ndarray:
    """Keep the top-k (or nucleus) of each row, renormalised."""
    order = np.argsort(-dist, axis=1, kind="stable")
    sorted_p = np.take_along_axis(dist, order, axis=1)
    if cfg.top_p is None:
        keep = np.zeros_like(sorted_p, dtype=bool)
        keep[:, : cfg.k] = True
    else:
        csum = np.cumsum(sorted_p, axis=1)
        keep = (csum - sorted_p) < cfg.top_p
    keep &= sorted_p > 0
    keep[:, 0] = True
    kept = np.where(keep, sorted_p, 0.0)
    out = np.zeros_like(dist)
    np.put_along_axis(out, order, kept / kept.sum(axis=1, keepdims=True), axis=1)
    return out


def _draw(p: np.ndarray, rng: Rng) -> int:
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def generate_batch(lm: CausalLM, teacher: Classifier, targets: Sequence[int], cfg: SteerConfig,
                   rngs: Sequence[Rng], teacher_id: int = 0) -> list[PseudoSample]:
    """Sample one sequence per target; row ``j`` draws only from ``rngs[j]``."""
    targets = np.asarray(targets, dtype=np.int64)
    n = len(targets)
    V = lm.spec.vocab_size
    if teacher.spec.max_len < cfg.max_len or lm.spec.max_len < cfg.max_len + 1:
        raise ValueError("model max_len too short for the requested generation length")
    toks = np.zeros((n, cfg.max_len), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    traces = np.zeros((n, cfg.max_len))
    active = np.ones(n, dtype=bool)
    base_ban = np.zeros(V, dtype=bool)
    base_ban[[PAD, BOS]] = True
    for t in range(cfg.max_len):
        rows = np.flatnonzero(active)
        if len(rows) == 0:
            break
        ban = base_ban.copy()
        if t < cfg.min_len:
            ban[EOS] = True
        dist = steered_batch(lm, teacher, toks[rows, :t], targets[rows], cfg, ban)
        dist = _truncate(dist, cfg)
        for r, row in enumerate(rows):
            tok = _draw(dist[r], rngs[row])
            traces[row, t] = dist[r, tok]
            if tok == EOS:
                active[row] = False
                continue
            toks[row, t] = tok
            lengths[row] = t + 1
    return [PseudoSample(toks[j, : lengths[j]].copy(), int(targets[j]), teacher_id,
                         traces[j, : lengths[j]].copy()) for j in range(n)]


def sample_sequence(lm: CausalLM, teacher: Classifier, c: int, cfg: SteerConfig, rng: Rng,
                    teacher_id: int = 0) -> PseudoSample:
    return generate_batch(lm, teacher, [c], cfg, [rng], teacher_id)[0]


def build_transfer_set(lm: CausalLM, teachers: Sequence[Classifier], cfg: SteerConfig,
                       rng: Rng) -> TransferSet:
    """Generate ``n_samples`` per (teacher, class); hold out a fixed share of each class."""
    if len(teachers) == 0:
        raise ValueError("no teachers")
    cfg.validate(lm.spec.vocab_size)
    n_held = int(round(cfg.n_samples * cfg.heldout_fraction))
    if not 0 < n_held < cfg.n_samples:
        raise ValueError("heldout_fraction leaves an empty split")
    train, heldout = [], {}
    for i, teacher in enumerate(teachers):
        jobs = [(c, j) for c in range(teacher.spec.n_classes) for j in range(cfg.n_samples)]
        samples = []
        for s in range(0, len(jobs), cfg.batch_size):
            chunk = jobs[s:s + cfg.batch_size]
            rngs = [rng.child("sample", i, c, j) for c, j in chunk]
            samples += generate_batch(lm, teacher, [c for c, _ in chunk], cfg, rngs, teacher_id=i)
        held = []
        for (c, j), smp in zip(jobs, samples):
            (held if j < n_held else train).append(smp)
        heldout[i] = held
    return TransferSet(train, heldout, cfg)


def steering_success(teacher: Classifier, samples: Sequence[PseudoSample]) -> float:
    """Share of samples the teacher assigns to their target class."""
    if not samples:
        return float("nan")
    from .models import layer_reps

    _, logits = layer_reps(teacher, [s.tokens for s in samples])
    return float(np.mean(logits.argmax(axis=1) == np.array([s.target for s in samples])))


# ---------------------------------------------------------------------------
# serialisation


def save_transfer_set(ts: TransferSet, directory, assignment: LabelAssignment) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = []
    groups = {"train": ts.train, **{f"heldout_{i}": s for i, s in ts.heldout.items()}}
    for name, samples in groups.items():
        write_records(d / f"{name}.tsv", [s.tokens for s in samples],
                      [assignment.subsets[s.teacher][s.target] for s in samples])
        meta.append({"split": name, "samples": [
            {"teacher": s.teacher, "target": s.target,
             "mean_step_prob": float(s.trace.mean()) if s.trace is not None and len(s.trace) else None}
            for s in samples]})
    manifest = {"format_version": FORMAT_VERSION, "steer": ts.config.to_dict(),
                "labels": assignment.to_dict(), "groups": meta}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_transfer_set(directory) -> TransferSet:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported pseudo-data manifest version")
    cfg = SteerConfig.from_dict(manifest["steer"])
    train, heldout = [], {}
    for group in manifest["groups"]:
        seqs, _ = read_records(d / f"{group['split']}.tsv")
        samples = [PseudoSample(s, m["target"], m["teacher"]) for s, m in zip(seqs, group["samples"])]
        if group["split"] == "train":
            train = samples
        else:
            heldout[int(group["split"].split("_")[1])] = samples
    return TransferSet(train, heldout, cfg)
