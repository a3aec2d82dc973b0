"""Gaussian confidence scores over teacher representations.

Class-conditional Gaussians share one pooled within-class covariance; a
single background Gaussian is fit to all fitting samples regardless of label.
Both covariances get a ridge of ``ridge * trace(S) / d``. Quadratic forms go
through the cached Cholesky factor, never an explicit inverse.
"""
from __future__ import annotations

import dataclasses
import warnings
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky
from sklearn.metrics import roc_auc_score

from . import _kernels

SOURCES = ("rmd", "md", "msp")


@dataclasses.dataclass
class ConfidenceScore:
    raw: float
    standardized: float


@dataclasses.dataclass
class GaussianStats:
    classes: np.ndarray
    means: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    bg_mean: np.ndarray
    bg_cov: np.ndarray
    bg_chol: np.ndarray
    conf_mean: float = 0.0
    conf_std: float = 1.0
    md_mean: float = 0.0
    md_std: float = 1.0

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.{f.name}": np.asarray(getattr(self, f.name), dtype=np.float64)
               for f in dataclasses.fields(self)}
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "GaussianStats":
        kw = {}
        for f in dataclasses.fields(cls):
            a = arrays[f"{prefix}.{f.name}"]
            kw[f.name] = float(a) if a.ndim == 0 else a
        kw["classes"] = kw["classes"].astype(np.int64)
        return cls(**kw)


def _regularize(cov: np.ndarray, ridge: float) -> np.ndarray:
    d = cov.shape[0]
    eps = ridge * np.trace(cov) / d
    eps = max(eps, 1e-12)
    cov = 0.5 * (cov + cov.T) + eps * np.eye(d)
    return cov


def fit(reps: np.ndarray, labels: np.ndarray, classes: Sequence[int] | None = None,
        ridge: float = 1e-3) -> GaussianStats:
    """Fit class means, pooled covariance and the background Gaussian."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    if reps.ndim != 2 or reps.shape[1] < 1:
        raise ValueError("reps must be (n, d) with d >= 1")
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    d = reps.shape[1]
    means = np.zeros((len(classes), d))
    scatter = np.zeros((d, d))
    dof = 0
    for j, y in enumerate(classes):
        rows = reps[labels == y]
        if len(rows) == 0:
            raise ValueError(f"class {int(y)} has no fitting samples")
        means[j] = rows.mean(axis=0)
        if len(rows) < 2:
            warnings.warn(f"class {int(y)} has a single fitting sample; it only contributes its mean",
                          stacklevel=2)
            continue
        c = rows - means[j]
        scatter += c.T @ c
        dof += len(rows) - 1
    cov = scatter / dof if dof > 0 else np.eye(d)
    cov = _regularize(cov, ridge)
    bg_mean = reps.mean(axis=0)
    bc = reps - bg_mean
    bg_cov = _regularize(bc.T @ bc / max(len(reps) - 1, 1), ridge)
    stats = GaussianStats(np.asarray(classes, dtype=np.int64), means, cov, cholesky(cov, lower=True),
                          bg_mean, bg_cov, cholesky(bg_cov, lower=True))
    raw = raw_confidence(stats, reps)
    stats.conf_mean, stats.conf_std = float(raw.mean()), _safe_std(raw)
    mdc = md_confidence(stats, reps)
    stats.md_mean, stats.md_std = float(mdc.mean()), _safe_std(mdc)
    return stats


def _safe_std(x: np.ndarray) -> float:
    s = float(x.std())
    return s if s > 1e-12 else 1.0


def _as_rows(h, d: int) -> tuple[np.ndarray, bool]:
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h = h.reshape(1, -1) if single else h
    if h.shape[1] != d:
        raise ValueError(f"expected dimension {d}, got {h.shape[1]}")
    return h, single


def _class_index(stats: GaussianStats, y: int) -> int:
    hit = np.flatnonzero(stats.classes == y)
    if len(hit) == 0:
        raise KeyError(f"class {y} not in fitted stats")
    return int(hit[0])


def md_all(stats: GaussianStats, h) -> np.ndarray:
    """Mahalanobis distance to every class mean, shape ``(n, C)``."""
    H, _ = _as_rows(h, stats.dim)
    out = np.empty((len(H), len(stats.classes)))
    for j, mu in enumerate(stats.means):
        out[:, j] = _kernels.chol_sq_norms(stats.chol, H - mu)
    return out


def md_bg(stats: GaussianStats, h) -> np.ndarray:
    H, single = _as_rows(h, stats.dim)
    out = _kernels.chol_sq_norms(stats.bg_chol, H - stats.bg_mean)
    return out[0] if single else out


def md(stats: GaussianStats, h, y: int):
    H, single = _as_rows(h, stats.dim)
    j = _class_index(stats, y)
    out = _kernels.chol_sq_norms(stats.chol, H - stats.means[j])
    return float(out[0]) if single else out


def rmd(stats: GaussianStats, h, y: int):
    """Class distance minus background distance; negative means closer to the class."""
    H, single = _as_rows(h, stats.dim)
    out = md(stats, H, y) - md_bg(stats, H)
    return float(out[0]) if single else out


def rmd_all(stats: GaussianStats, h) -> np.ndarray:
    H, _ = _as_rows(h, stats.dim)
    return md_all(stats, H) - md_bg(stats, H)[:, None]


def raw_confidence(stats: GaussianStats, h) -> np.ndarray:
    return -rmd_all(stats, h).min(axis=1)


def md_confidence(stats: GaussianStats, h) -> np.ndarray:
    return -md_all(stats, h).min(axis=1)


def confidence(stats: GaussianStats, h) -> ConfidenceScore | list[ConfidenceScore]:
    H, single = _as_rows(h, stats.dim)
    raw = raw_confidence(stats, H)
    z = (raw - stats.conf_mean) / stats.conf_std
    scores = [ConfidenceScore(float(r), float(s)) for r, s in zip(raw, z)]
    return scores[0] if single else scores


def msp(logits) -> float | np.ndarray:
    """Maximum softmax probability (temperature 1)."""
    x = np.asarray(logits, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    out = p.max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def auroc(id_scores, ood_scores) -> float:
    """Area under ROC with in-distribution as the positive class (higher score = more in-domain)."""
    y = np.r_[np.ones(len(id_scores)), np.zeros(len(ood_scores))]
    return float(roc_auc_score(y, np.r_[id_scores, ood_scores]))


# ---------------------------------------------------------------------------
# per-teacher bundles


@dataclasses.dataclass
class TeacherOOD:
    """Per-block Gaussian stats plus the MSP standardisation for one teacher."""

    blocks: list[GaussianStats]
    msp_mean: float
    msp_std: float

    def scores(self, block_reps: np.ndarray, logits: np.ndarray, source: str = "rmd") -> np.ndarray:
        """Standardised confidences ``(n, B)`` for every block."""
        if source not in SOURCES:
            raise ValueError(f"unknown confidence source {source!r}")
        if source == "msp":
            s = (msp(logits) - self.msp_mean) / self.msp_std
            return np.repeat(np.atleast_1d(s)[:, None], len(self.blocks), axis=1)
        cols = []
        for b, st in enumerate(self.blocks):
            if source == "rmd":
                cols.append((raw_confidence(st, block_reps[:, b]) - st.conf_mean) / st.conf_std)
            else:
                cols.append((md_confidence(st, block_reps[:, b]) - st.md_mean) / st.md_std)
        return np.stack(cols, axis=1)

    def standardize(self, block_reps: np.ndarray) -> np.ndarray:
        """Per-dimension z-scores of ``(n, B, d)`` block vectors under the background Gaussians."""
        mu = np.stack([st.bg_mean for st in self.blocks])
        sd = np.sqrt(np.stack([np.diag(st.bg_cov) for st in self.blocks]))
        return (block_reps - mu) / sd

    def raw_scores(self, block_reps: np.ndarray, logits: np.ndarray, block: int = -1) -> dict[str, np.ndarray]:
        st = self.blocks[block]
        h = block_reps[:, block]
        return {"rmd": raw_confidence(st, h), "md": md_confidence(st, h), "msp": msp(logits)}

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.msp_mean": np.float64(self.msp_mean), f"{prefix}.msp_std": np.float64(self.msp_std),
               f"{prefix}.n_blocks": np.float64(len(self.blocks))}
        for b, st in enumerate(self.blocks):
            out.update(st.to_arrays(f"{prefix}.block{b}"))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str) -> "TeacherOOD":
        nb = int(arrays[f"{prefix}.n_blocks"])
        blocks = [GaussianStats.from_arrays(arrays, f"{prefix}.block{b}") for b in range(nb)]
        return cls(blocks, float(arrays[f"{prefix}.msp_mean"]), float(arrays[f"{prefix}.msp_std"]))


def fit_teacher(block_reps: np.ndarray, labels: np.ndarray, logits: np.ndarray, n_classes: int,
                ridge: float = 1e-3) -> TeacherOOD:
    """Fit one teacher's stats from held-out pseudo-data features ``(n, B, d)``."""
    classes = np.arange(n_classes)
    blocks = [fit(block_reps[:, b], labels, classes, ridge) for b in range(block_reps.shape[1])]
    m = msp(logits)
    return TeacherOOD(blocks, float(np.mean(m)), _safe_std(np.atleast_1d(m)))
