"""Experiment configuration: nested frozen dataclasses with a strict JSON form.

Canonical serialisation is ``json.dumps(cfg.to_dict(), sort_keys=True,
indent=2)`` plus a trailing newline; the run directory is named after the
first 12 hex digits of its SHA-256. Unknown keys and wrong versions are
rejected when loading.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from pathlib import Path

from .corpus import TaskSpec
from .generator import SteerConfig
from .training import TrainConfig

CONFIG_VERSION = 1

METHODS = ("stratanet", "stratanet_mul", "stratanet_noST", "md_conf", "msp_conf",
           "vanilla_ka_R", "vanilla_ka_CD", "ensemble", "teacher_only")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration documents."""


@dataclasses.dataclass(frozen=True)
class LMConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    corpus_size: int = 3000
    train: TrainConfig = TrainConfig(epochs=4, lr=1e-3, warmup_epochs=0.5)


@dataclasses.dataclass(frozen=True)
class TeacherConfig:
    k: int = 2
    overlap: str = "disjoint"
    depths: tuple[int, ...] = (4, 4)
    dims: tuple[int, ...] = (64, 64)
    n_heads: int = 4
    min_accuracy: float = 0.9
    train: TrainConfig = TrainConfig(epochs=10, lr=1e-3, warmup_epochs=1.0)


@dataclasses.dataclass(frozen=True)
class StudentConfig:
    n_layers: int = 3
    d_model: int = 48
    n_heads: int = 4
    train: TrainConfig = TrainConfig(epochs=20, lr=1e-3, warmup_epochs=1.0)


@dataclasses.dataclass(frozen=True)
class AmalgamSettings:
    lam: float = 0.65
    tau: float = 0.75
    ridge: float = 1e-3
    share_blocks: bool = False
    standardize_feats: bool = True
    unit_norm: bool = True
    train_targets: bool = False


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = TaskSpec()
    lm: LMConfig = LMConfig()
    teachers: TeacherConfig = TeacherConfig()
    student: StudentConfig = StudentConfig()
    steer: SteerConfig = SteerConfig()
    amalgam: AmalgamSettings = AmalgamSettings()
    method: str = "stratanet"
    seed: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        t = self.teachers
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if len(t.depths) != t.k or len(t.dims) != t.k:
            raise ConfigError("teachers.depths and teachers.dims need one entry per teacher")
        if self.student.n_layers > min(t.depths):
            raise ConfigError("student depth exceeds the shallowest teacher")
        if any(d % t.n_heads for d in t.dims) or self.student.d_model % self.student.n_heads:
            raise ConfigError("model widths must be divisible by the head count")
        if not 0.0 <= self.amalgam.lam <= 1.0:
            raise ConfigError("amalgam.lam must lie in [0, 1]")
        if self.amalgam.tau <= 0:
            raise ConfigError("amalgam.tau must be positive")
        if self.steer.max_len < self.task.max_len:
            raise ConfigError("steer.max_len (the model context) is shorter than task.max_len")
        try:
            self.steer.validate(self.task.vocab_size)
        except ValueError as exc:
            raise ConfigError(f"steer: {exc}") from None
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        """Dotted keys reach into sections, e.g. ``replace(**{"amalgam.lam": 0.0})``."""
        d = self.to_dict()
        for key, value in changes.items():
            _set_path(d, key.split("."), _to_plain(value))
        return ExperimentConfig.from_dict(d)  # validated once, after all changes

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be an object")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')}")
        try:
            return _from_plain(cls, d, "")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


def _set_path(d: dict, path: list[str], value) -> None:
    for head in path[:-1]:
        if not isinstance(d.get(head), dict):
            raise ConfigError(f"unknown key {head!r}")
        d = d[head]
    if path[-1] not in d:
        raise ConfigError(f"unknown key {path[-1]!r}")
    d[path[-1]] = value


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, d: dict, where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key {where}{unknown[0]!r}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kw = {}
    for name, value in d.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{name} must be an object")
            # a partial section overrides that section's own default, not the bare class default
            base = defaults[name]
            merged = {**_to_plain(base), **value} if dataclasses.is_dataclass(base) else value
            kw[name] = _from_plain(hint, merged, f"{where}{name}.")
        elif typing.get_origin(hint) is tuple:
            if not isinstance(value, list):
                raise ConfigError(f"{where}{name} must be a list")
            kw[name] = tuple(value)
        else:
            kw[name] = _check_scalar(hint, value, f"{where}{name}")
    return cls(**kw)


def _check_scalar(hint, value, where: str):
    allowed = typing.get_args(hint) or (hint,)
    if value is None and type(None) in allowed:
        return None
    if bool in allowed:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if float in allowed and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if int in allowed and isinstance(value, int) and not isinstance(value, bool):
        return value
    if str in allowed and isinstance(value, str):
        return value
    raise ConfigError(f"{where} has the wrong type")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return ExperimentConfig.from_dict(doc)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.canonical())
