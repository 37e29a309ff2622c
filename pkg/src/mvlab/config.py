"""Experiment configuration: JSON parsing, defaults, validation and overrides.

A config file is a JSON object with optional sections ``data``, ``arch``,
``train`` (with nested ``attack``, ``eval_attack`` and ``loss``) and
``probes``, plus a few top-level keys.  Unknown keys are rejected by full
dotted path.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .attacks import AttackConfig
from .data import DistributionConfig
from .errors import ConfigurationError
from .patchnet import TEACHER_METHODS, LossSpec, ModelArch
from .trainers import TrainConfig

OUT_ENV = "MVLAB_OUT"
DEFAULT_OUT = "out"


@dataclass
class ArchConfig:
    """Network section; k, d and P default to (and must agree with) the data section."""

    m: int = 40
    activation: str = "relu"
    k: Optional[int] = None
    d: Optional[int] = None
    P: Optional[int] = None


@dataclass
class ProbeConfig:
    enabled: bool = True
    threshold: float = 0.5
    single_view: bool = True
    learning_order: bool = True


@dataclass
class ExperimentConfig:
    data: DistributionConfig = field(default_factory=DistributionConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    n_train: int = 2000
    n_test: int = 1000
    seeds: Optional[list] = None
    output_dir: Optional[str] = None
    run_id: str = "run"
    dataset_path: Optional[str] = None
    teacher_path: Optional[str] = None

    def arch_for(self) -> ModelArch:
        data = self.data.resolved()
        return ModelArch(k=data.k, d=data.d, P=data.P, m=self.arch.m, activation=self.arch.activation)

    @property
    def probe_threshold(self) -> float:
        return self.probes.threshold

    @property
    def run_dir(self) -> str:
        return os.path.join(self.output_dir or DEFAULT_OUT, self.run_id)

    def to_dict(self) -> dict:
        return _plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# section name -> dataclass, per owning class
_NESTED = {
    ExperimentConfig: {"data": DistributionConfig, "arch": ArchConfig, "train": TrainConfig, "probes": ProbeConfig},
    TrainConfig: {"attack": AttackConfig, "eval_attack": AttackConfig, "loss": LossSpec},
}
_TUPLES = {"main_coeff_range", "decay_at", "clamp_box"}
_HIDDEN = {LossSpec: {"teacher"}}  # runtime-only fields, never in config files


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        hidden = _HIDDEN.get(type(obj), set())
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in hidden}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path or 'config'} must be a JSON object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - _HIDDEN.get(cls, set())
    for key in raw:
        if key not in names:
            raise ConfigurationError(f"unknown config key {path + key!r}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for key, value in raw.items():
        if key in nested:
            kwargs[key] = _build(nested[key], value, f"{path}{key}.")
        elif key in _TUPLES and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in {path.rstrip('.') or 'config'}: {exc}") from None


def _check_types(cfg: ExperimentConfig) -> None:
    def want(value, types, name):
        if isinstance(value, bool) and bool not in types:
            raise ConfigurationError(f"{name} must be {types[0].__name__}, got {value!r}")
        if not isinstance(value, types):
            raise ConfigurationError(f"{name} must be {types[0].__name__}, got {value!r}")

    number = (int, float)
    for name in ("k", "d", "C_p", "seed"):
        want(getattr(cfg.data, name), (int,), f"data.{name}")
    for name in ("s", "mu", "noise_std"):
        want(getattr(cfg.data, name), number, f"data.{name}")
    want(cfg.arch.m, (int,), "arch.m")
    for name in ("n_clean", "n_adv", "n_warmup", "batch_size", "seed", "eval_every"):
        want(getattr(cfg.train, name), (int,), f"train.{name}")
    for name in ("lr", "momentum", "weight_decay", "decay_factor"):
        want(getattr(cfg.train, name), number, f"train.{name}")
    for section in ("attack", "eval_attack"):
        a = getattr(cfg.train, section)
        want(a.epsilon, number, f"train.{section}.epsilon")
        want(a.steps, (int,), f"train.{section}.steps")
    want(cfg.train.loss.beta, number, "train.loss.beta")
    want(cfg.train.loss.tau, number, "train.loss.tau")
    want(cfg.n_train, (int,), "n_train")
    want(cfg.n_test, (int,), "n_test")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill derived defaults and check every section and cross-section rule."""
    _check_types(cfg)
    cfg.data = cfg.data.resolved()
    for name in ("k", "d", "P"):
        given = getattr(cfg.arch, name)
        actual = getattr(cfg.data, name)
        if given is not None and given != actual:
            raise ConfigurationError(f"arch.{name}={given} disagrees with data.{name}={actual}")
        setattr(cfg.arch, name, actual)
    cfg.arch_for()  # ModelArch validates m and activation
    cfg.train.validate()
    loss = cfg.train.loss
    loss.validate(require_teacher=False)  # the teacher is attached at run time
    if cfg.n_train < 1:
        raise ConfigurationError(f"n_train must be >= 1, got {cfg.n_train}")
    if cfg.n_test < 0:
        raise ConfigurationError(f"n_test must be >= 0, got {cfg.n_test}")
    if not 0 < cfg.probes.threshold <= 1:
        raise ConfigurationError(f"probes.threshold must lie in (0, 1], got {cfg.probes.threshold}")
    if cfg.seeds is not None:
        if not isinstance(cfg.seeds, list) or not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds):
            raise ConfigurationError("seeds must be a non-empty list of integers")
    for name, seed in [("data.seed", cfg.data.seed), ("train.seed", cfg.train.seed)] + [("seeds", s) for s in cfg.seeds or []]:
        if seed < 0:
            raise ConfigurationError(f"{name} must be >= 0, got {seed}")
    if not cfg.run_id or os.sep in cfg.run_id:
        raise ConfigurationError(f"run_id must be a non-empty name without {os.sep!r}")
    if cfg.output_dir is None:
        cfg.output_dir = os.environ.get(OUT_ENV, DEFAULT_OUT)
    uses_teacher = loss.method in TEACHER_METHODS or (
        cfg.train.init_from_teacher and loss.method != "CLEAN"
    )
    if uses_teacher and cfg.train.n_clean == 0 and cfg.teacher_path is None:
        raise ConfigurationError(
            f"train.loss.method={loss.method} needs a teacher but train.n_clean=0 and teacher_path is unset"
        )
    return cfg


def from_dict(raw: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw, ""))


def parse_config(path) -> ExperimentConfig:
    """Read, default-fill and validate a JSON config file.

    Raises ``OSError`` when the file cannot be read and
    :class:`ConfigurationError` for unknown keys or invalid values.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Set dotted keys, e.g. ``[("train.loss.tau", "5")]``; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(raw))
    for dotted, text in overrides:
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"cannot override {dotted!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = _coerce(text) if isinstance(text, str) else text
    return out
