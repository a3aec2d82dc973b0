"""End-to-end experiment: teachers, pseudo-data, confidence fitting, students, evaluation.

An :class:`Experiment` builds each stage lazily and caches it. With a
``workdir`` every stage is also written to disk and reloaded on the next run;
with ``build_missing=False`` a stage whose artifact is absent raises
:class:`MissingArtifact` instead of being rebuilt, which is how the CLI
enforces command order. ``build_missing`` may also name the stages (by key
prefix, e.g. ``{"student"}``) that are still allowed to build.

The student-training path only sees pseudo-data, random text or
cross-domain text. The task's train split is read while fitting teachers and
its access log is cleared right after; :meth:`Experiment.train_split_reads`
exposes any later read.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import amalgam as A
from . import ood
from . import tensor as T
from .config import METHODS, ExperimentConfig
from .corpus import (LabelAssignment, Task, assign_labels, cross_domain_spec, cross_domain_text,
                     iter_batches, make_task, random_corpus, save_task, unlabeled_corpus)
from .generator import (TransferSet, build_transfer_set, load_transfer_set, save_transfer_set,
                        SteerConfig)
from .models import (BOS, CausalLM, Classifier, ModelSpec, layer_reps, load_arrays, load_model,
                     pad_batch, pool_block, save_arrays, save_model)
from .tensor import Rng
from .training import Trainer, accuracy, train_classifier, train_lm

log = logging.getLogger(__name__)

AMALGAM_METHODS = {
    "stratanet": ("st", "rmd"),
    "stratanet_mul": ("mul", "rmd"),
    "stratanet_noST": ("noST", "rmd"),
    "md_conf": ("st", "md"),
    "msp_conf": ("st", "msp"),
}
TRAINED_METHODS = tuple(AMALGAM_METHODS) + ("vanilla_ka_R", "vanilla_ka_CD")


class MissingArtifact(FileNotFoundError):
    """A prerequisite stage has not been produced in the run directory."""


class TeacherTrainingError(RuntimeError):
    pass


@dataclasses.dataclass
class TeacherView:
    """Frozen-teacher outputs on a fixed set of sequences."""

    blocks: np.ndarray  # (n, B, d_i)
    logits: np.ndarray  # (n, c_i)


@dataclasses.dataclass
class MethodResult:
    method: str
    seed: int
    accuracy: float
    lam: float | None = None
    k_teachers: int = 2

    def record(self, digest: str) -> dict:
        return {"config": digest, **dataclasses.asdict(self)}


class Experiment:
    def __init__(self, cfg: ExperimentConfig, workdir=None, build_missing: bool | Iterable[str] = True):
        self.cfg = cfg
        self.rng = Rng(cfg.seed)
        self.workdir = Path(workdir) if workdir is not None else None
        self.build_missing = build_missing if isinstance(build_missing, bool) else tuple(build_missing)
        self.timings: dict[str, float] = {}
        self.histories: dict[str, list[tuple[float | None, float | None]]] = {}
        self._cache: dict = {}

    # -- plumbing ---------------------------------------------------------

    def _path(self, *parts) -> Path | None:
        return None if self.workdir is None else self.workdir.joinpath(*parts)

    def _may_build(self, key: str) -> bool:
        if isinstance(self.build_missing, bool):
            return self.build_missing
        return any(key.startswith(p) for p in self.build_missing)

    def _stage(self, key: str, build, load=None, save=None, marker: Path | None = None):
        if key in self._cache:
            return self._cache[key]
        if marker is not None and load is not None and marker.exists():
            value = load()
        elif marker is not None and not self._may_build(key):
            raise MissingArtifact(f"missing artifact: {marker}")
        else:
            t0 = time.perf_counter()
            value = build()
            self.timings[key] = time.perf_counter() - t0
            if marker is not None and save is not None:
                save(value)
        self._cache[key] = value
        return value

    # -- stages -----------------------------------------------------------

    @property
    def task(self) -> Task:
        if "task" not in self._cache:
            self._cache["task"] = make_task(self.cfg.task)
            if self.workdir is not None:
                d = self._path("task")
                d.mkdir(parents=True, exist_ok=True)
                save_task(self._cache["task"], d, self.assignment)
        return self._cache["task"]

    @property
    def assignment(self) -> LabelAssignment:
        t = self.cfg.teachers
        return assign_labels(self.cfg.task.n_classes, t.k, t.overlap)

    @property
    def n_blocks(self) -> int:
        return self.cfg.student.n_layers

    def teacher_spec(self, i: int) -> ModelSpec:
        t = self.cfg.teachers
        return ModelSpec(self.cfg.task.vocab_size, self.cfg.steer.max_len, t.depths[i], t.dims[i],
                         t.n_heads, len(self.assignment.subsets[i]), "classifier")

    def student_spec(self) -> ModelSpec:
        s = self.cfg.student
        return ModelSpec(self.cfg.task.vocab_size, self.cfg.steer.max_len, s.n_layers, s.d_model,
                         s.n_heads, self.cfg.task.n_classes, "classifier")

    def lm(self) -> CausalLM:
        c = self.cfg.lm
        path = self._path("models", "lm")

        def build():
            spec = ModelSpec(self.cfg.task.vocab_size, self.cfg.steer.max_len + 1, c.n_layers, c.d_model,
                             c.n_heads, 0, "causal_lm")
            model = CausalLM(spec, self.rng.child("lm"))
            corpus = unlabeled_corpus(self.task, c.corpus_size, self.rng.child("lm_corpus"), eos=True)
            corpus = [np.concatenate([[BOS], s]) for s in corpus]
            train_lm(model, corpus, c.train, self.rng.child("lm_train"))
            return model.freeze()

        return self._stage("lm", build, lambda: load_model(path)[0].freeze(),
                           lambda m: save_model(m, path), _marker(path))

    def teachers(self) -> list[Classifier]:
        d = self._path("models")
        marker = None if d is None else d / f"teacher_{self.cfg.teachers.k - 1}.json"

        def build():
            out, accs = [], []
            task = self.task
            for i, subset in enumerate(self.assignment.subsets):
                model = Classifier(self.teacher_spec(i), self.rng.child("teacher", i))
                tr = task.train.select_labels(subset)
                train_classifier(model, tr.seqs, tr.labels, self.cfg.teachers.train, self.rng.child("teacher_train", i))
                va = task.valid.select_labels(subset)
                acc = accuracy(model, va.seqs, va.labels)
                accs.append(acc)
                if acc < self.cfg.teachers.min_accuracy:
                    raise TeacherTrainingError(
                        f"teacher {i} reached {acc:.3f} validation accuracy on labels {list(subset)}, "
                        f"below the {self.cfg.teachers.min_accuracy:.2f} threshold")
                out.append(model.freeze())
            self._cache["teacher_valid_accuracy"] = accs
            # teachers are the only consumers of the labelled train split
            task.train.access_log.clear()
            return out

        def save(models):
            for i, m in enumerate(models):
                save_model(m, d / f"teacher_{i}", {"labels": list(self.assignment.subsets[i])})

        def load():
            return [load_model(d / f"teacher_{i}")[0].freeze() for i in range(self.cfg.teachers.k)]

        return self._stage("teachers", build, load, save, marker)

    def train_split_reads(self) -> list[str]:
        return list(self.task.train.access_log)

    def transfer_set(self) -> TransferSet:
        d = self._path("pseudo")

        def build():
            return build_transfer_set(self.lm(), self.teachers(), self.cfg.steer, self.rng.child("generate"))

        return self._stage("transfer", build, lambda: load_transfer_set(d),
                           lambda ts: save_transfer_set(ts, d, self.assignment),
                           None if d is None else d / "manifest.json")

    def view(self, i: int, seqs: Sequence[np.ndarray]) -> TeacherView:
        reps, logits = layer_reps(self.teachers()[i], list(seqs))
        return TeacherView(A.block_reps(reps, self.n_blocks), logits)

    def ood_stats(self) -> list[ood.TeacherOOD]:
        path = self._path("ood", "stats")

        def build():
            ts = self.transfer_set()
            out = []
            for i in range(self.cfg.teachers.k):
                held = ts.heldout[i]
                v = self.view(i, [s.tokens for s in held])
                out.append(ood.fit_teacher(v.blocks, np.array([s.target for s in held]), v.logits,
                                           len(self.assignment.subsets[i]), self.cfg.amalgam.ridge))
            return out

        def save(stats):
            arrays = {}
            for i, st in enumerate(stats):
                arrays.update(st.to_arrays(f"teacher{i}"))
            save_arrays(path, arrays, {"kind": "ood", "k": len(stats)})

        def load():
            arrays, meta = load_arrays(path)
            return [ood.TeacherOOD.from_arrays(arrays, f"teacher{i}") for i in range(meta["k"])]

        return self._stage("ood", build, load, save, _marker(path))

    # -- students ---------------------------------------------------------

    def _pseudo_views(self) -> tuple[list[np.ndarray], list[TeacherView]]:
        if "pseudo_views" not in self._cache:
            seqs = [s.tokens for s in self.transfer_set().train]
            self._cache["pseudo_views"] = (seqs, [self.view(i, seqs) for i in range(self.cfg.teachers.k)])
        return self._cache["pseudo_views"]

    def transfer_size(self) -> int:
        s = self.cfg.steer
        per_class = s.n_samples - int(round(s.n_samples * s.heldout_fraction))
        return per_class * sum(len(sub) for sub in self.assignment.subsets)

    def new_student(self, method: str) -> Classifier:
        return Classifier(self.student_spec(), self.rng.child("student", method))

    def train_amalgam_student(self, method: str = "stratanet", lam: float | None = None) -> Classifier:
        variant, source = AMALGAM_METHODS[method]
        lam = self.cfg.amalgam.lam if lam is None else lam
        tau = self.cfg.amalgam.tau
        seqs, views = self._pseudo_views()
        stats = self.ood_stats()
        feats = [stats[i].standardize(v.blocks) if self.cfg.amalgam.standardize_feats else v.blocks
                 for i, v in enumerate(views)]
        confs = [stats[i].scores(v.blocks, v.logits, source) for i, v in enumerate(views)]
        final = np.stack([c[:, -1] for c in confs], axis=1)
        target = A.union_mixture([v.logits for v in views], A.teacher_weights(final), self.assignment, tau)

        student = self.new_student(method)
        net = A.AmalgamNet(self.cfg.teachers.dims, self.n_blocks, self.cfg.student.d_model,
                           self.rng.child("amalgam", method),
                           A.AmalgamConfig(variant, self.cfg.amalgam.share_blocks, self.cfg.student.n_heads))
        tc = self.cfg.student.train
        # trained jointly, both sides of the amal loss drift to a shared constant; by default the
        # target side (f, g, query token, fuser) stays at its seeded init and only p_b learns
        side = net.parameters() if self.cfg.amalgam.train_targets else net.projection_parameters()
        trained = {id(p) for p in side}
        for p in net.parameters():
            p.requires_grad = id(p) in trained
        params = student.parameters() + (side if lam > 0 else [])
        trainer = Trainer(params, tc, len(seqs))
        parts = A.partition(self.cfg.student.n_layers, self.n_blocks)
        history = self.histories.setdefault(method if lam == self.cfg.amalgam.lam else f"{method}_lam{lam:g}", [])
        for epoch in range(tc.epochs):
            for idx in iter_batches(len(seqs), tc.batch_size, self.rng.child("student_batches", method, epoch)):
                arr, _ = pad_batch([seqs[j] for j in idx])
                states, logits, mask = student.forward(arr)
                amal = out = None
                if lam > 0:
                    pooled = [T.masked_mean(s, mask) for s in states]
                    s_blocks = [pool_block(pooled[p.start:p.stop]) for p in parts]
                    goals = net.targets([f[idx] for f in feats], [c[idx] for c in confs])
                    proj = net.project(s_blocks)
                    if self.cfg.amalgam.unit_norm:
                        proj, goals = [A.unit_rows(x) for x in proj], [A.unit_rows(x) for x in goals]
                    amal = A.amal_loss(proj, goals)
                if lam < 1:
                    out = A.distill_loss(target[idx], logits, tau)
                trainer.step(A.total_loss(amal, out, lam))
                history.append((None if amal is None else float(amal.data), None if out is None else float(out.data)))
        return student.freeze()

    def train_vanilla_student(self, method: str) -> Classifier:
        """Out-loss-only distillation of the concatenated-logit ensemble on non-task text."""
        n = self.transfer_size()
        rng = self.rng.child("transfer_text", method)
        if method == "vanilla_ka_R":
            seqs = random_corpus(self.cfg.task.vocab_size, n, self.cfg.steer.min_len, self.cfg.steer.max_len, rng)
        else:
            seqs = cross_domain_text(cross_domain_spec(self.cfg.task), n, rng)
        tau = self.cfg.amalgam.tau
        logits = [layer_reps(t, seqs)[1] for t in self.teachers()]
        target = A._softmax_rows(A.ensemble_logits(logits, self.assignment), tau)
        student = self.new_student(method)
        tc = self.cfg.student.train
        trainer = Trainer(student.parameters(), tc, n)
        for epoch in range(tc.epochs):
            for idx in iter_batches(n, tc.batch_size, self.rng.child("student_batches", method, epoch)):
                arr, _ = pad_batch([seqs[j] for j in idx])
                _, s_logits, _ = student.forward(arr)
                trainer.step(A.distill_loss(target[idx], s_logits, tau))
        return student.freeze()

    def student(self, method: str, lam: float | None = None) -> Classifier:
        if method not in TRAINED_METHODS:
            raise ValueError(f"{method} has no trained student")
        tag = method if lam is None else f"{method}_lam{lam:g}"
        path = self._path("models", f"student_{tag}")

        def build():
            self.ood_stats() if method in AMALGAM_METHODS else self.teachers()
            if method in AMALGAM_METHODS:
                return self.train_amalgam_student(method, lam)
            return self.train_vanilla_student(method)

        return self._stage(f"student:{tag}", build, lambda: load_model(path)[0].freeze(),
                           lambda m: save_model(m, path, {"method": method, "lam": lam}), _marker(path))

    # -- evaluation -------------------------------------------------------

    def test_logits(self) -> list[np.ndarray]:
        if "test_logits" not in self._cache:
            self._cache["test_logits"] = [layer_reps(t, self.task.test.seqs)[1] for t in self.teachers()]
        return self._cache["test_logits"]

    def evaluate(self, method: str, lam: float | None = None) -> MethodResult:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        test = self.task.test
        labels = test.labels
        if method == "ensemble":
            pred = A.ensemble_logits(self.test_logits(), self.assignment).argmax(axis=1)
            acc = float(np.mean(pred == labels))
        elif method == "teacher_only":
            acc = max(self.single_teacher_accuracies())
        else:
            acc = accuracy(self.student(method, lam), test.seqs, labels)
        lam_used = (self.cfg.amalgam.lam if lam is None else lam) if method in AMALGAM_METHODS else None
        return MethodResult(method, self.cfg.seed, acc, lam_used, self.cfg.teachers.k)

    def single_teacher_accuracies(self) -> list[float]:
        labels = self.task.test.labels
        out = []
        for i, lg in enumerate(self.test_logits()):
            pred = A.teacher_only_probs(lg, self.assignment, i).argmax(axis=1)
            out.append(float(np.mean(pred == labels)))
        return out

    def ood_auroc(self, block: int = -1) -> dict[str, list[float]]:
        """Per-teacher AUROC of each confidence source: own-label test rows vs the rest."""
        test = self.task.test
        seqs, labels = test.seqs, test.labels
        out = {s: [] for s in ood.SOURCES}
        for i, st in enumerate(self.ood_stats()):
            v = self.view(i, seqs)
            inside = np.isin(labels, self.assignment.subsets[i])
            raw = st.raw_scores(v.blocks, v.logits, block)
            for s in ood.SOURCES:
                out[s].append(ood.auroc(raw[s][inside], raw[s][~inside]))
        return out

    def steering_rates(self, gammas: Iterable[float] = (0.0, 2.0), n_per_class: int = 20) -> dict[float, float]:
        """Teacher-assessed target-class rate per gamma, averaged over teachers and classes."""
        out = {}
        for g in gammas:
            cfg = dataclasses.replace(self.cfg.steer, gamma=float(g), n_samples=n_per_class, heldout_fraction=0.5)
            ts = build_transfer_set(self.lm(), self.teachers(), cfg, self.rng.child("steer_probe", float(g)))
            rates = []
            for i, teacher in enumerate(self.teachers()):
                samples = ts.train + ts.heldout[i]
                mine = [s for s in samples if s.teacher == i]
                _, logits = layer_reps(teacher, [s.tokens for s in mine])
                hit = logits.argmax(axis=1) == np.array([s.target for s in mine])
                targets = np.array([s.target for s in mine])
                rates += [float(hit[targets == c].mean()) for c in np.unique(targets)]
            out[float(g)] = float(np.mean(rates))
        return out


def _marker(path: Path | None) -> Path | None:
    return None if path is None else path.with_suffix(".json")


# ---------------------------------------------------------------------------
# multi-seed reports


@dataclasses.dataclass
class RunReport:
    results: list[MethodResult]
    auroc: dict[int, dict[str, list[float]]] = dataclasses.field(default_factory=dict)
    steering: dict[int, dict[float, float]] = dataclasses.field(default_factory=dict)
    wall_clock: float = 0.0

    def accuracies(self, method: str, lam: float | None = None) -> np.ndarray:
        return np.array([r.accuracy for r in self.results
                         if r.method == method and (lam is None or r.lam == lam)])

    def summary(self) -> dict[str, tuple[float, float]]:
        """Mean and population std of accuracy per (method, lambda) row."""
        rows: dict[str, list[float]] = {}
        for r in self.results:
            key = r.method if r.lam is None else f"{r.method}@{r.lam:g}"
            rows.setdefault(key, []).append(r.accuracy)
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in rows.items()}

    def table(self) -> str:
        lines = [f"{'method':<24} {'accuracy':>16}  seeds"]
        counts: dict[str, int] = {}
        for r in self.results:
            key = r.method if r.lam is None else f"{r.method}@{r.lam:g}"
            counts[key] = counts.get(key, 0) + 1
        for key, (m, s) in self.summary().items():
            lines.append(f"{key:<24} {100 * m:8.2f} +- {100 * s:5.2f}  {counts[key]}")
        return "\n".join(lines)


def run_methods(cfg: ExperimentConfig, seeds: Sequence[int], methods: Sequence[str] = METHODS,
                lams: Sequence[float | None] = (None,), with_diagnostics: bool = True) -> RunReport:
    t0 = time.perf_counter()
    report = RunReport([])
    for seed in seeds:
        exp = Experiment(dataclasses.replace(cfg, seed=seed))
        for method in methods:
            for lam in (lams if method in AMALGAM_METHODS else (None,)):
                report.results.append(exp.evaluate(method, lam))
        if with_diagnostics:
            report.auroc[seed] = exp.ood_auroc()
    report.wall_clock = time.perf_counter() - t0
    return report


def sweep_lambda(cfg: ExperimentConfig, values: Sequence[float], seeds: Sequence[int]) -> RunReport:
    return run_methods(cfg, seeds, ("stratanet",), lams=tuple(values), with_diagnostics=False)


HETERO_DEPTHS = {2: (4, 6), 3: (4, 6, 8), 4: (4, 6, 8, 6)}
HETERO_DIMS = {2: (48, 64), 3: (48, 64, 80), 4: (48, 64, 80, 64)}


def teacher_sweep_config(cfg: ExperimentConfig, k: int) -> ExperimentConfig:
    """Heterogeneous ``k``-teacher variant of ``cfg`` on a task with two labels per teacher."""
    depths = HETERO_DEPTHS.get(k, tuple(4 + 2 * (i % 3) for i in range(k)))
    dims = HETERO_DIMS.get(k, tuple(48 + 16 * (i % 3) for i in range(k)))
    n_classes = max(cfg.task.n_classes, 2 * k)
    return cfg.replace(**{"task.n_classes": n_classes, "teachers.k": k,
                          "teachers.depths": depths, "teachers.dims": dims})


def sweep_teachers(cfg: ExperimentConfig, ks: Sequence[int], seeds: Sequence[int],
                   methods: Sequence[str] = ("stratanet", "ensemble")) -> RunReport:
    t0 = time.perf_counter()
    report = RunReport([])
    for k in ks:
        sub = teacher_sweep_config(cfg, k)
        for seed in seeds:
            exp = Experiment(dataclasses.replace(sub, seed=seed))
            report.results += [exp.evaluate(m) for m in methods]
    report.wall_clock = time.perf_counter() - t0
    return report


def write_records(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
