"""Transformer encoder classifiers and a causal LM built on :mod:`dfka.tensor`.

Token id conventions shared by every model in one experiment: ``PAD=0``,
``BOS=1``, ``EOS=2``; content tokens start at ``FIRST_CONTENT``. Batches are
right-padded with ``PAD`` and attention never looks at padded keys.
"""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor

PAD, BOS, EOS = 0, 1, 2
FIRST_CONTENT = 3
CHECKPOINT_VERSION = 1
_NEG = -1e9


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    vocab_size: int
    max_len: int
    n_layers: int
    d_model: int
    n_heads: int
    n_classes: int = 0
    kind: str = "classifier"

    def __post_init__(self):
        if self.kind not in ("classifier", "causal_lm"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.kind == "classifier" and self.n_classes < 2:
            raise ValueError("a classifier needs n_classes >= 2")
        if self.vocab_size <= FIRST_CONTENT:
            raise ValueError("vocab too small")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# modules


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.name == "param":
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield from sub.named_parameters(f"{prefix}{name}.{i}.{j}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            if p.shape != state[k].shape:
                raise T.ShapeError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _param(data) -> Tensor:
    return T.parameter(data, name="param")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, std: float | None = None):
        std = std if std is not None else 1.0 / math.sqrt(d_in)
        self.weight = _param(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class SelfAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: Rng):
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng.child("q"))
        self.wk = Linear(d, d, rng.child("k"))
        self.wv = Linear(d, d, rng.child("v"))
        self.wo = Linear(d, d, rng.child("o"), std=1.0 / math.sqrt(2 * d))

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, causal: bool = False) -> Tensor:
        B, N, d = x.shape
        h = self.n_heads
        dh = d // h

        def heads(t):
            return T.transpose(T.reshape(t, (B, N, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        blocked = None
        if key_mask is not None:
            blocked = ~key_mask.astype(bool)[:, None, None, :]
        if causal:
            tri = np.triu(np.ones((N, N), dtype=bool), k=1)[None, None]
            blocked = tri if blocked is None else (blocked | tri)
        if blocked is not None:
            scores = T.masked_fill(scores, blocked, _NEG)
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, d))
        return self.wo(out)


class Block(Module):
    """Pre-norm transformer layer: attention then GELU feed-forward, both residual."""

    def __init__(self, d: int, n_heads: int, rng: Rng, ff_mult: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, rng.child("attn"))
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, ff_mult * d, rng.child("ff1"))
        self.ff2 = Linear(ff_mult * d, d, rng.child("ff2"), std=1.0 / math.sqrt(2 * ff_mult * d))

    def __call__(self, x: Tensor, key_mask=None, causal: bool = False) -> Tensor:
        x = x + self.attn(self.ln1(x), key_mask, causal)
        return x + self.ff2(T.gelu(self.ff1(self.ln2(x))))


class Encoder(Module):
    def __init__(self, spec: ModelSpec, rng: Rng):
        d = spec.d_model
        self.tok_emb = _param(rng.child("tok").normal(0.0, 0.1, size=(spec.vocab_size, d)))
        self.pos_emb = _param(rng.child("pos").normal(0.0, 0.02, size=(spec.max_len, d)))
        self.blocks = [Block(d, spec.n_heads, rng.child("block", i)) for i in range(spec.n_layers)]
        self.ln_f = LayerNorm(d)

    def __call__(self, tokens: np.ndarray, mask: np.ndarray, causal: bool = False):
        N = tokens.shape[1]
        x = T.embedding(self.tok_emb, tokens) + self.pos_emb[:N]
        states = []
        for blk in self.blocks:
            x = blk(x, mask, causal)
            states.append(x)
        return states, self.ln_f(x)


# ---------------------------------------------------------------------------
# input handling


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences into ``(tokens, mask)``; rejects empty or over-long rows."""
    if len(seqs) == 0:
        raise ValueError("empty batch")
    lens = [len(s) for s in seqs]
    if min(lens) == 0:
        raise ValueError("empty sequence")
    if max_len is not None and max(lens) > max_len:
        raise ValueError(f"sequence longer than max_len={max_len}")
    out = np.full((len(seqs), max(lens)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, out != PAD


def _as_batch(tokens, max_len: int, vocab: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(tokens, np.ndarray) and tokens.ndim == 2:
        arr = tokens.astype(np.int64, copy=False)
        if arr.shape[1] == 0:
            raise ValueError("empty sequence")
        if arr.shape[1] > max_len:
            raise ValueError(f"sequence longer than max_len={max_len}")
        mask = arr != PAD
        if not mask[:, 0].all():
            raise ValueError("sequences must start with a non-pad token")
    else:
        seqs = [tokens] if len(tokens) == 0 or np.ndim(tokens[0]) == 0 else list(tokens)
        arr, mask = pad_batch(seqs, max_len)
    if arr.min() < 0 or arr.max() >= vocab:
        raise IndexError(f"token id out of range [0, {vocab})")
    return arr, mask


# ---------------------------------------------------------------------------
# models


class Classifier(Module):
    """Encoder + mean-pooled final layer + linear head."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        if spec.kind != "classifier":
            raise ValueError("Classifier needs a classifier spec")
        self.spec = spec
        self.encoder = Encoder(spec, rng.child("encoder"))
        self.head = Linear(spec.d_model, spec.n_classes, rng.child("head"), std=0.02)

    def forward(self, tokens) -> tuple[list[Tensor], Tensor, np.ndarray]:
        """Return ``(layer_states, logits, mask)`` for a sequence or a batch."""
        arr, mask = _as_batch(tokens, self.spec.max_len, self.spec.vocab_size)
        states, final = self.encoder(arr, mask)
        logits = self.head(T.masked_mean(final, mask))
        return states, logits, mask

    __call__ = forward


class CausalLM(Module):
    def __init__(self, spec: ModelSpec, rng: Rng):
        if spec.kind != "causal_lm":
            raise ValueError("CausalLM needs a causal_lm spec")
        self.spec = spec
        self.encoder = Encoder(spec, rng.child("encoder"))
        self.head = Linear(spec.d_model, spec.vocab_size, rng.child("head"), std=0.02)

    def forward(self, tokens) -> Tensor:
        """Logits ``(B, N, V)``; position t predicts token t+1."""
        arr, mask = _as_batch(tokens, self.spec.max_len, self.spec.vocab_size)
        _, final = self.encoder(arr, mask, causal=True)
        return self.head(final)

    __call__ = forward


def classifier_forward(model: Classifier, tokens) -> tuple[list[np.ndarray], np.ndarray]:
    """Inference helper: per-layer token states and logits for one sequence."""
    with T.no_grad():
        states, logits, _ = model.forward(list(tokens))
    return [s.data[0] for s in states], logits.data[0]


def lm_forward(model: CausalLM, tokens: Sequence[int]) -> np.ndarray:
    """Next-token logits after ``tokens`` (the caller includes BOS if wanted)."""
    with T.no_grad():
        logits = model.forward(list(tokens))
    return logits.data[0, -1]


def lm_next_logits(model: CausalLM, prefixes: np.ndarray) -> np.ndarray:
    """Next-token logits for a batch of equal-length content prefixes (BOS is prepended)."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    B = prefixes.shape[0]
    inp = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), prefixes], axis=1)
    with T.no_grad():
        logits = model.forward(inp)
    return logits.data[:, -1, :]


# ---------------------------------------------------------------------------
# pooling


def pool_layer(states, mask: np.ndarray | None = None):
    """Mean over tokens of one layer's token states.

    Accepts a ``(N, d)`` array, or a ``(B, N, d)`` tensor/array with ``mask``.
    """
    if isinstance(states, Tensor):
        if mask is None:
            mask = np.ones(states.shape[:2], dtype=bool)
        return T.masked_mean(states, mask)
    states = np.asarray(states)
    if states.ndim == 2:
        if states.shape[0] < 1:
            raise ValueError("pool_layer needs at least one token")
        return states.mean(axis=0)
    if mask is None:
        return states.mean(axis=1)
    m = mask.astype(states.dtype)
    return (states * m[..., None]).sum(axis=1) / m.sum(axis=1, keepdims=True)


def pool_block(layer_reps):
    """Elementwise mean of the pooled layer vectors belonging to one block."""
    if len(layer_reps) == 0:
        raise ValueError("empty block")
    if isinstance(layer_reps[0], Tensor):
        acc = layer_reps[0]
        for r in layer_reps[1:]:
            acc = acc + r
        return acc * (1.0 / len(layer_reps))
    return np.mean(np.stack([np.asarray(r) for r in layer_reps]), axis=0)


def layer_reps(model: Classifier, tokens, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Pooled per-layer representations ``(n, L, d)`` and logits ``(n, C)`` for many sequences."""
    reps, logits = [], []
    for i in range(0, len(tokens), batch_size):
        chunk = list(tokens[i:i + batch_size])
        arr, mask = pad_batch(chunk)
        with T.no_grad():
            states, lg, _ = model.forward(arr)
        reps.append(np.stack([pool_layer(s.data, mask) for s in states], axis=1))
        logits.append(lg.data)
    return np.concatenate(reps), np.concatenate(logits)


# ---------------------------------------------------------------------------
# checkpoints


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian raw arrays)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                            "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = dict(meta)
    manifest["format_version"] = CHECKPOINT_VERSION
    manifest["tensors"] = entries
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path.with_suffix(".json")
    if not mpath.exists():
        raise FileNotFoundError(str(mpath))
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = path.with_suffix(".bin").read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        dt = np.dtype("<" + e["dtype"]) if e["dtype"][0] in "fiu" else np.dtype(e["dtype"])
        buf = raw[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, manifest


def save_model(model, path, extra: dict | None = None) -> None:
    meta = {"kind": type(model).__name__, "spec": model.spec.to_dict(),
            "dtype": str(model.parameters()[0].dtype)}
    if extra:
        meta["extra"] = extra
    save_arrays(path, model.state_dict(), meta)


def load_model(path):
    arrays, manifest = load_arrays(path)
    spec = ModelSpec.from_dict(manifest["spec"])
    cls = {"Classifier": Classifier, "CausalLM": CausalLM}[manifest["kind"]]
    with T.precision(manifest["dtype"]):
        model = cls(spec, Rng(0))
    model.load_state_dict(arrays)
    return model, manifest.get("extra", {})


def build_model(spec: ModelSpec, rng: Rng):
    return Classifier(spec, rng) if spec.kind == "classifier" else CausalLM(spec, rng)
