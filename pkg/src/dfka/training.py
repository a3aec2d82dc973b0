"""Supervised training loops for teachers and the base LM."""
from __future__ import annotations

import dataclasses
import logging
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import iter_batches
from .models import CausalLM, Classifier, layer_reps, pad_batch
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_epochs: float = 2.0
    grad_clip: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Trainer:
    """AdamW + linear warmup/decay + global-norm clipping over a fixed parameter list."""

    def __init__(self, params: Sequence[T.Tensor], cfg: TrainConfig, n_items: int):
        self.params = list(params)
        self.cfg = cfg
        steps_per_epoch = max(1, -(-n_items // cfg.batch_size))
        self.total = steps_per_epoch * cfg.epochs
        self.warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
        self.opt = T.AdamW(self.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.step_no = 0

    def step(self, loss: T.Tensor) -> float:
        self.opt.zero_grad()
        loss.backward()
        if self.cfg.grad_clip:
            T.clip_grad_norm(self.params, self.cfg.grad_clip)
        lr = T.linear_schedule(self.step_no, self.total, self.warmup, self.cfg.lr)
        self.opt.step(lr)
        self.step_no += 1
        return float(loss.data)


def train_classifier(model: Classifier, seqs: Sequence[np.ndarray], labels: np.ndarray,
                     cfg: TrainConfig, rng: Rng) -> list[float]:
    labels = np.asarray(labels)
    trainer = Trainer(model.parameters(), cfg, len(seqs))
    losses = []
    for epoch in range(cfg.epochs):
        for idx in iter_batches(len(seqs), cfg.batch_size, rng.child("epoch", epoch)):
            arr, _ = pad_batch([seqs[i] for i in idx])
            _, logits, _ = model.forward(arr)
            losses.append(trainer.step(T.cross_entropy(logits, labels[idx])))
    return losses


def train_lm(model: CausalLM, seqs: Sequence[np.ndarray], cfg: TrainConfig, rng: Rng) -> list[float]:
    """Next-token cross-entropy; ``seqs`` must already start with BOS."""
    trainer = Trainer(model.parameters(), cfg, len(seqs))
    losses = []
    V = model.spec.vocab_size
    for epoch in range(cfg.epochs):
        for idx in iter_batches(len(seqs), cfg.batch_size, rng.child("epoch", epoch)):
            arr, mask = pad_batch([seqs[i] for i in idx])
            logits = model.forward(arr[:, :-1])
            tgt = arr[:, 1:]
            valid = mask[:, 1:].reshape(-1)
            flat = T.reshape(logits, (-1, V))
            rows = np.flatnonzero(valid)
            loss = T.cross_entropy(T.getitem(flat, rows), tgt.reshape(-1)[rows])
            losses.append(trainer.step(loss))
    return losses


def accuracy(model: Classifier, seqs: Sequence[np.ndarray], labels: np.ndarray) -> float:
    _, logits = layer_reps(model, seqs)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))
