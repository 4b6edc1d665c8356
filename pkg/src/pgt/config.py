"""Run configuration: a flat, typed ``key: type = value`` text format.

Example::

    seed: int = 0
    model.layers: str[] = temporal:32:3:pmco@0.9, relu
    schedule.P: int = 5
    train.lr: float = 0.1

Keys are dotted (``model.*``, ``schedule.*``, ``train.*``, ``task.*``,
``io.*`` and the top-level ``seed``).  The type annotation may be omitted
in hand-written files; :func:`dumps` always writes it, and
``dumps(loads(dumps(c))) == dumps(c)`` byte for byte.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .analysis import SyntheticTaskSpec
from .errors import ConfigError
from .experiment import ScheduleConfig
from .layers import ModelSpec
from .training import TrainConfig

DEFAULT_LAYERS = ("temporal:32:3:pmco", "relu", "temporal:32:3:pmco", "relu", "temporal:32:3:pmco", "relu")

ALIASES = {"schedule.P": "schedule.num_steps", "schedule.T_prime": "schedule.step_length"}


@dataclass
class ModelSection:
    layers: tuple[str, ...] = DEFAULT_LAYERS
    dtype: str = "float64"
    init: str = "he"


@dataclass
class TrainSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    warmup_epochs: int = 3
    lr_schedule: str = "cosine"
    batch_size: int = 32
    loss_aggregation: str = "per_step_mean"
    grad_clip: float = 0.0


@dataclass
class TaskSection:
    T: int = 36
    C: int = 8
    markers: int = 2
    early: tuple[int, ...] = (0, 6)
    late: tuple[int, ...] = (29, 35)
    rule: str = "pair_mod"
    noise: float = 0.3
    n_train: int = 2048
    n_val: int = 512


@dataclass
class IoSection:
    out_dir: str = "run"
    metrics: str = "metrics.csv"
    checkpoint: str = "model.pgtc"
    data: str = ""  # npz from `pgt gendata`; empty means generate from task.* and seed


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainSection = field(default_factory=TrainSection)
    task: TaskSection = field(default_factory=TaskSection)
    io: IoSection = field(default_factory=IoSection)

    # -- builders
    def task_spec(self) -> SyntheticTaskSpec:
        t = self.task
        return SyntheticTaskSpec(T=t.T, C=t.C, markers=t.markers, early=tuple(t.early), late=tuple(t.late),
                                 rule=t.rule, noise=t.noise, n_train=t.n_train, n_val=t.n_val)

    def model_spec(self) -> ModelSpec:
        task = self.task_spec()
        try:
            spec = ModelSpec(task.C, task.num_classes, list(self.model.layers), dtype=self.model.dtype,
                             init=self.model.init)
        except ValueError as exc:
            raise ConfigError(str(exc), key="model.layers") from exc
        if self.schedule.regime == "clip":
            spec = spec.with_variant("local")
        return spec

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **{f.name: getattr(self.train, f.name) for f in fields(self.train)})

    def path(self, name: str) -> str:
        value = getattr(self.io, name)
        return value if os.path.isabs(value) else os.path.join(self.io.out_dir, value)

    def validate(self) -> None:
        self.train_config()
        sched = self.schedule
        if sched.regime not in ("progressive", "clip"):
            raise ConfigError(f"unknown regime {sched.regime!r}", key="schedule.regime")
        if sched.step_length < 2 or sched.num_steps < 1:
            raise ConfigError("need step_length >= 2 and num_steps >= 1", key="schedule")
        if sched.dpr not in ("Off", "A", "B"):
            raise ConfigError(f"unknown DPR mode {sched.dpr!r}", key="schedule.dpr")
        if sched.total > self.task.T:
            raise ConfigError(f"schedule covers {sched.total} frames but sequences have {self.task.T}",
                              key="schedule")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.model.dtype!r}", key="model.dtype")
        self.task_spec().validate()
        self.model_spec()


_SECTIONS = ("model", "schedule", "train", "task", "io")


def _type_tag(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "str"
    if isinstance(value, (tuple, list)):
        return "int[]" if value and all(isinstance(v, int) for v in value) else "str[]"
    raise TypeError(type(value))


def _schema(cfg: RunConfig) -> dict[str, str]:
    """Dotted key -> type tag, taken from the defaults."""
    out = {"seed": "int"}
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            out[f"{sec}.{f.name}"] = _type_tag(getattr(obj, f.name))
    return out


SCHEMA = _schema(RunConfig())


def _format(value, tag: str) -> str:
    if tag == "bool":
        return "true" if value else "false"
    if tag == "float":
        return repr(float(value))
    if tag.endswith("[]"):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(key: str, tag: str, text: str):
    text = text.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if tag == "str[]":
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if tag == "int[]":
            return tuple(int(s) for s in text.split(",") if s.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {tag}", key=key) from None


def canonical_key(key: str) -> str:
    key = ALIASES.get(key, key)
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}", key=key)
    return key


def set_value(cfg: RunConfig, key: str, text: str, declared: str | None = None) -> RunConfig:
    """Return a copy of ``cfg`` with one dotted key replaced (value given as text)."""
    key = canonical_key(key)
    tag = SCHEMA[key]
    if declared is not None and declared != tag:
        raise ConfigError(f"{key} has type {tag}, not {declared}", key=key)
    value = _parse_value(key, tag, text)
    if key == "seed":
        return replace(cfg, seed=value)
    sec, name = key.split(".", 1)
    return replace(cfg, **{sec: replace(getattr(cfg, sec), **{name: value})})


def loads(text: str, overrides=()) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: type = value'", key=line)
        lhs, value = line.split("=", 1)
        key, _, declared = lhs.partition(":")
        cfg = set_value(cfg, key.strip(), value, declared.strip() or None)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        key, value = item.split("=", 1)
        cfg = set_value(cfg, key.strip(), value)
    return cfg


def dumps(cfg: RunConfig) -> str:
    lines = [f"seed: int = {cfg.seed}"]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            key = f"{sec}.{f.name}"
            lines.append(f"{key}: {SCHEMA[key]} = {_format(getattr(obj, f.name), SCHEMA[key])}".rstrip())
    return "\n".join(lines) + "\n"


def load(path, overrides=()) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", key=str(path)) from exc
    return loads(text, overrides)
