"""Synthetic topic-classification tasks and teacher label splits.

Each class owns a disjoint set of dominant content tokens and a
Dirichlet-perturbed unigram topic over the whole content vocabulary. A shared
sparse bigram "grammar" over function words gives sequences local structure a
language model can learn. Sequence generation: the first token comes from the
class topic; afterwards each token is drawn from the topic with probability
``topic_mass`` and from the grammar row of the previous token otherwise.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .models import EOS, FIRST_CONTENT
from .tensor import Rng

FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 4
    vocab_size: int = 64
    min_len: int = 8
    max_len: int = 16
    dominant_per_class: int = 5
    topic_mass: float = 0.5
    dominant_mass: float = 0.6
    confusion: float = 0.0
    concentration: float = 100.0
    grammar_alpha: float = 0.3
    n_train: int = 300
    n_valid: int = 50
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("bad length range")
        if self.dominant_mass + self.confusion > 1.0 or min(self.dominant_mass, self.confusion) < 0:
            raise ValueError("dominant_mass + confusion must lie in [0, 1]")
        if not 0.0 < self.topic_mass <= 1.0:
            raise ValueError("topic_mass must lie in (0, 1]")
        n_content = self.vocab_size - FIRST_CONTENT
        if self.n_classes * self.dominant_per_class + 2 > n_content:
            raise ValueError(
                f"vocab too small: {self.n_classes} classes x {self.dominant_per_class} dominant tokens "
                f"need more than {n_content} content tokens"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    def partner(self, y: int) -> int:
        """The class whose dominant tokens leak into class ``y``'s topic."""
        return (y + max(1, self.n_classes // 2)) % self.n_classes


class Split:
    """Labelled sequences. Reads of ``seqs``/``labels`` are appended to ``access_log``."""

    def __init__(self, name: str, seqs: Sequence[np.ndarray], labels: Sequence[int]):
        self.name = name
        self._seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
        self._labels = np.asarray(labels, dtype=np.int64)
        self.access_log: list[str] = []

    @property
    def seqs(self) -> list[np.ndarray]:
        self.access_log.append(f"{self.name}.seqs")
        return self._seqs

    @property
    def labels(self) -> np.ndarray:
        self.access_log.append(f"{self.name}.labels")
        return self._labels

    def __len__(self) -> int:
        return len(self._labels)

    def subset(self, keep: np.ndarray, name: str | None = None) -> "Split":
        keep = np.asarray(keep)
        return Split(name or self.name, [self.seqs[i] for i in keep], self.labels[keep])

    def select_labels(self, label_set: Sequence[int], remap: bool = True) -> "Split":
        """Rows whose label is in ``label_set``, optionally re-indexed to ``0..len(label_set)-1``."""
        label_set = list(label_set)
        labels = self.labels
        keep = np.flatnonzero(np.isin(labels, label_set))
        sub = self.subset(keep)
        if remap:
            lut = {y: i for i, y in enumerate(label_set)}
            sub._labels = np.array([lut[int(y)] for y in sub._labels], dtype=np.int64)
        return sub


@dataclasses.dataclass
class Task:
    spec: TaskSpec
    topics: np.ndarray
    grammar: np.ndarray
    dominant: list[np.ndarray]
    splits: dict[str, Split]

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def valid(self) -> Split:
        return self.splits["valid"]

    @property
    def test(self) -> Split:
        return self.splits["test"]

    def __post_init__(self):
        self._topic_cdf = np.cumsum(self.topics, axis=1)
        self._grammar_cdf = np.cumsum(self.grammar, axis=1)

    def sample(self, y: int, rng: Rng) -> np.ndarray:
        return _sample_sequence(self.spec, self._topic_cdf[y], self._grammar_cdf, rng)


@dataclasses.dataclass(frozen=True)
class LabelAssignment:
    subsets: tuple[tuple[int, ...], ...]
    mode: str
    n_union: int

    @property
    def k(self) -> int:
        return len(self.subsets)

    def to_local(self, i: int) -> dict[int, int]:
        return {y: j for j, y in enumerate(self.subsets[i])}

    def union_index(self, i: int) -> np.ndarray:
        """Union label of each of teacher ``i``'s local classes."""
        return np.asarray(self.subsets[i], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"subsets": [list(s) for s in self.subsets], "mode": self.mode, "n_union": self.n_union}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelAssignment":
        return cls(tuple(tuple(s) for s in d["subsets"]), d["mode"], d["n_union"])


# ---------------------------------------------------------------------------
# generation


def _layout(spec: TaskSpec, rng: Rng):
    content = rng.child("layout").permutation(np.arange(FIRST_CONTENT, spec.vocab_size))
    k = spec.dominant_per_class
    dominant = [np.sort(content[y * k:(y + 1) * k]) for y in range(spec.n_classes)]
    function_words = np.sort(content[spec.n_classes * k:])
    return dominant, function_words


def _topics(spec: TaskSpec, dominant, rng: Rng) -> np.ndarray:
    n_content = spec.vocab_size - FIRST_CONTENT
    topics = np.zeros((spec.n_classes, spec.vocab_size))
    rest = 1.0 - spec.dominant_mass - spec.confusion
    for y in range(spec.n_classes):
        base = np.zeros(spec.vocab_size)
        base[FIRST_CONTENT:] = rest / n_content
        base[dominant[y]] += spec.dominant_mass / len(dominant[y])
        p = dominant[spec.partner(y)]
        base[p] += spec.confusion / len(p)
        alpha = spec.concentration * base[FIRST_CONTENT:] * n_content
        topics[y, FIRST_CONTENT:] = rng.child("topic", y).dirichlet(np.maximum(alpha, 1e-3))
    return topics


def _grammar(spec: TaskSpec, function_words, rng: Rng) -> np.ndarray:
    g = np.zeros((spec.vocab_size, spec.vocab_size))
    alpha = np.full(len(function_words), spec.grammar_alpha)
    draws = rng.child("grammar").dirichlet(alpha, size=spec.vocab_size)
    g[:, function_words] = draws
    return g


def _sample_sequence(spec: TaskSpec, topic_cdf: np.ndarray, grammar_cdf: np.ndarray, rng: Rng) -> np.ndarray:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    u = rng.random(2 * n)
    out = np.empty(n, dtype=np.int64)
    last = len(topic_cdf) - 1
    out[0] = min(np.searchsorted(topic_cdf, u[0] * topic_cdf[-1], side="right"), last)
    for t in range(1, n):
        cdf = topic_cdf if u[n + t] < spec.topic_mass else grammar_cdf[out[t - 1]]
        out[t] = min(np.searchsorted(cdf, u[t] * cdf[-1], side="right"), last)
    return out


def make_task(spec: TaskSpec) -> Task:
    """Build a task with balanced, mutually disjoint train/valid/test splits."""
    rng = Rng(spec.seed).child("task")
    dominant, function_words = _layout(spec, rng)
    topics = _topics(spec, dominant, rng)
    grammar = _grammar(spec, function_words, rng)
    task = Task(spec, topics, grammar, dominant, {})
    seen: set[tuple] = set()
    for name, n in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        seqs, labels = [], []
        for y in range(spec.n_classes):
            srng = rng.child("split", name, y)
            got = 0
            while got < n:
                s = task.sample(y, srng)
                key = tuple(s.tolist())
                if key in seen:
                    continue
                seen.add(key)
                seqs.append(s)
                labels.append(y)
                got += 1
        order = rng.child("order", name).permutation(len(labels))
        task.splits[name] = Split(name, [seqs[i] for i in order], np.asarray(labels, dtype=np.int64)[order])
    return task


def unlabeled_corpus(task: Task, n: int, rng: Rng, eos: bool = False) -> list[np.ndarray]:
    """Fresh draws from the task's generative process with a uniform class prior, labels dropped."""
    ys = rng.child("classes").integers(0, task.spec.n_classes, size=n)
    out = []
    for j, y in enumerate(ys):
        s = task.sample(int(y), rng.child("seq", j))
        out.append(np.append(s, EOS) if eos else s)
    return out


def random_text(vocab_size: int, length: int, seed) -> np.ndarray:
    """Uniform draw over content tokens (special ids excluded)."""
    rng = seed if isinstance(seed, Rng) else Rng(int(seed))
    return rng.integers(FIRST_CONTENT, vocab_size, size=length).astype(np.int64)


def random_corpus(vocab_size: int, n: int, min_len: int, max_len: int, rng: Rng) -> list[np.ndarray]:
    lens = rng.child("lens").integers(min_len, max_len + 1, size=n)
    return [random_text(vocab_size, int(L), rng.child("seq", j)) for j, L in enumerate(lens)]


def cross_domain_spec(spec: TaskSpec, offset: int = 7919) -> TaskSpec:
    """A task over the same vocabulary with independently drawn topics and grammar."""
    return dataclasses.replace(spec, seed=spec.seed + offset, n_train=0, n_valid=0, n_test=0)


def cross_domain_text(other: TaskSpec, n: int, rng: Rng) -> list[np.ndarray]:
    return unlabeled_corpus(make_task(other), n, rng)


# ---------------------------------------------------------------------------
# label assignment


def _sizes(total: int, parts: int) -> list[int]:
    q, r = divmod(total, parts)
    return [q + 1 if i < r else q for i in range(parts)]


def assign_labels(labels, k: int, mode: str = "disjoint") -> LabelAssignment:
    """Split the union label set into ``k`` contiguous teacher subsets.

    ``disjoint`` chunks the labels; ``partial`` makes each subset share its
    first label with the previous subset's last one.
    """
    ys = list(range(labels)) if isinstance(labels, int) else sorted(int(y) for y in labels)
    n = len(ys)
    if k < 1:
        raise ValueError("need at least one teacher")
    if mode == "disjoint":
        if n < 2 * k:
            raise ValueError(f"cannot split {n} labels into {k} disjoint subsets of size >= 2")
        subsets, start = [], 0
        for s in _sizes(n, k):
            subsets.append(tuple(ys[start:start + s]))
            start += s
    elif mode == "partial":
        slots = n + k - 1
        if k < 2 or slots < 2 * k:
            raise ValueError(f"cannot split {n} labels into {k} overlapping subsets of size >= 2")
        subsets, start = [], 0
        for s in _sizes(slots, k):
            subsets.append(tuple(ys[start:start + s]))
            start += s - 1
    else:
        raise ValueError(f"unknown overlap mode {mode!r}")
    return LabelAssignment(tuple(subsets), mode, n)


# ---------------------------------------------------------------------------
# serialisation


def write_records(path, seqs: Sequence[Sequence[int]], labels: Sequence[int]) -> None:
    """One ``label<TAB>ids`` line per sequence."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s, y in zip(seqs, labels):
            fh.write(f"{int(y)}\t{' '.join(str(int(t)) for t in s)}\n")


def read_records(path) -> tuple[list[np.ndarray], np.ndarray]:
    seqs, labels = [], []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            y, _, ids = line.partition("\t")
            labels.append(int(y))
            seqs.append(np.array([int(t) for t in ids.split()], dtype=np.int64))
    return seqs, np.asarray(labels, dtype=np.int64)


def save_task(task: Task, directory, assignment: LabelAssignment | None = None) -> None:
    d = Path(directory)
    for name, split in task.splits.items():
        write_records(d / f"{name}.tsv", split._seqs, split._labels)
    manifest = {"format_version": FORMAT_VERSION, "task": task.spec.to_dict()}
    if assignment is not None:
        manifest["labels"] = assignment.to_dict()
        manifest["local_to_union"] = [list(s) for s in assignment.subsets]
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_task(directory) -> tuple[Task, LabelAssignment | None]:
    """Rebuild a task from its manifest; split contents are read back from disk."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported task manifest version")
    spec = TaskSpec.from_dict(manifest["task"])
    task = make_task(dataclasses.replace(spec, n_train=0, n_valid=0, n_test=0))
    task.spec = spec
    for name in ("train", "valid", "test"):
        seqs, labels = read_records(d / f"{name}.tsv")
        task.splits[name] = Split(name, seqs, labels)
    la = LabelAssignment.from_dict(manifest["labels"]) if "labels" in manifest else None
    return task, la


def iter_batches(n: int, batch_size: int, rng: Rng | None = None) -> Iterator[np.ndarray]:
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]
