"""Progressive and integrated training steps, SGD, LR schedule, checkpoints, metrics."""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, ScheduleError
from .layers import Model, ModelSpec
from .schedule import ProgressiveSchedule


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    warmup_epochs: int = 3
    lr_schedule: str = "cosine"
    batch_size: int = 32
    seed: int = 0
    loss_aggregation: str = "per_step_mean"
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive", key="train.lr")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", key="train.weight_decay")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs", key="train.warmup_epochs")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}", key="train.lr_schedule")
        if self.loss_aggregation not in ("per_step_sum", "per_step_mean"):
            raise ConfigError(f"unknown loss_aggregation {self.loss_aggregation!r}",
                              key="train.loss_aggregation")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="train.batch_size")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warm-up from 0.1*lr, then a half-period cosine decay."""
    base, warm = config.lr, config.warmup_epochs
    if epoch < warm:
        return base * (0.1 + 0.9 * epoch / warm)
    if config.lr_schedule == "constant":
        return base
    progress = (epoch - warm) / (config.epochs - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_update(params, grads, velocities, lr: float, momentum: float, weight_decay: float) -> None:
    """In place: ``v = momentum*v + (g + wd*p)``; ``p -= lr*v``."""
    for p, g, v in zip(params, grads, velocities):
        d = g + weight_decay * p if weight_decay else g
        v *= momentum
        v += d
        p -= lr * v


@dataclass
class SGD:
    params: list
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    velocities: list = field(default_factory=list)
    steps: int = 0

    def __post_init__(self):
        if not self.velocities:
            self.velocities = [np.zeros_like(p.value) for p in self.params]

    @classmethod
    def for_model(cls, model: Model, config: TrainConfig) -> "SGD":
        return cls(model.parameters(), config.momentum, config.weight_decay, config.grad_clip)

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        dtype = self.params[0].value.dtype.type
        sgd_update([p.value for p in self.params], grads, self.velocities,
                   dtype(lr), dtype(self.momentum), dtype(self.weight_decay))
        self.steps += 1


@dataclass
class StepReport:
    loss: float
    per_step_losses: list[float]
    logits: np.ndarray  # per-step logits averaged, [B, K]


def _check_finite(loss: ad.Node, step: int):
    if not np.all(np.isfinite(loss.value)):
        raise NumericError(f"non-finite loss at progressive step {step}", step=step)


def progressive_backward(model: Model, sequence, labels, schedule: ProgressiveSchedule,
                         loss_aggregation: str = "per_step_mean") -> StepReport:
    """Zero the gradients, then run every progressive step forward and backward.

    Each step consumes the Markov state produced by the previous one, and its
    graph is released by its own backward pass before the next step starts.
    Parameter gradients accumulate across steps.
    """
    x, _ = model.batch(sequence)
    if x.shape[1] != schedule.total_length:
        raise ScheduleError(
            f"sequence has {x.shape[1]} frames but the schedule covers {schedule.total_length}")
    weight = 1.0 / schedule.num_steps if loss_aggregation == "per_step_mean" else 1.0
    model.zero_grad()
    state = model.initial_state()
    losses, logits = [], []
    for p, (a, b) in enumerate(schedule.step_ranges, start=1):
        feats, state = model.features(ad.constant(x[:, a:b]), state)
        out = model.head(feats)
        loss = ad.cross_entropy(out, labels)
        _check_finite(loss, p)
        losses.append(float(loss.value))
        logits.append(out.value)
        ad.backward(loss if weight == 1.0 else ad.scale(loss, weight), accumulate=True)
    total = sum(losses) * weight if loss_aggregation == "per_step_mean" else sum(losses)
    return StepReport(total, losses, np.mean(logits, axis=0))


def integrated_backward(model: Model, clip, labels) -> StepReport:
    x, _ = model.batch(clip)
    model.zero_grad()
    feats, _ = model.features(ad.constant(x))
    out = model.head(feats)
    loss = ad.cross_entropy(out, labels)
    _check_finite(loss, 1)
    value = float(loss.value)
    ad.backward(loss, accumulate=True)
    return StepReport(value, [value], out.value)


def progressive_train_step(model: Model, sequence, labels, schedule: ProgressiveSchedule,
                           optimizer: SGD, lr: float,
                           loss_aggregation: str = "per_step_mean") -> StepReport:
    """One PGT update: P serial steps with state carry, one optimizer step."""
    report = progressive_backward(model, sequence, labels, schedule, loss_aggregation)
    optimizer.step(lr)
    return report


def integrated_train_step(model: Model, clip, labels, optimizer: SGD, lr: float) -> StepReport:
    """Conventional single-pass update on a clip with local operators only."""
    report = integrated_backward(model, clip, labels)
    optimizer.step(lr)
    return report


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PGTC"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, model: Model, optimizer: SGD | None = None, meta: dict | None = None) -> None:
    """Write header, parameter blobs (declaration order), optimizer blobs, JSON trailer."""
    dtype = model.dtype
    blobs = [(name, p.value) for name, p in model.params.items()]
    if optimizer is not None:
        blobs += [(f"optim.velocity.{name}", v) for name, v in zip(model.params, optimizer.velocities)]
    meta = dict(meta or {})
    meta["model_spec"] = model.spec.to_dict()
    if optimizer is not None:
        meta["optimizer_steps"] = optimizer.steps
    le = dtype.newbyteorder("<")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HB", FORMAT_VERSION, _DTYPE_CODES[dtype]))
        fh.write(model.spec.digest())
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())
        trailer = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(trailer)))
        fh.write(trailer)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return (header, named arrays, meta)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path} is not a PGTC checkpoint")
    version, code = struct.unpack_from("<HB", data, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    off = 7
    digest = data[off:off + 32]
    off += 32
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        n, ndim = struct.unpack_from("<HB", data, off)
        off += 3
        name = data[off:off + n].decode()
        off += n
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize,
                                     offset=off).reshape(shape).astype(dtype.newbyteorder("="))
        off += size
    (mlen,) = struct.unpack_from("<I", data, off)
    meta = json.loads(data[off + 4:off + 4 + mlen])
    header = {"version": version, "dtype": str(_CODE_DTYPES[code]), "digest": digest}
    return header, arrays, meta


def load_checkpoint(path, model: Model | None = None, optimizer: SGD | None = None) -> tuple[Model, dict]:
    """Restore parameters (and optimizer buffers) from ``path``.

    Without ``model`` one is built from the stored spec.  A model whose spec
    digest differs from the header is rejected.
    """
    header, arrays, meta = read_checkpoint(path)
    if model is None:
        spec_d = meta["model_spec"]
        model = Model(ModelSpec(**spec_d))
    if model.spec.digest() != header["digest"]:
        raise ConfigError(f"checkpoint {path} was written for a different model spec")
    model.load_state_dict(arrays)
    if optimizer is not None:
        for name, v in zip(model.params, optimizer.velocities):
            key = f"optim.velocity.{name}"
            if key in arrays:
                v[...] = arrays[key]
        optimizer.steps = meta.get("optimizer_steps", 0)
    return model, meta


# ---------------------------------------------------------------- metrics

METRIC_COLUMNS = ["epoch", "split", "loss", "accuracy", "lr", "peak_activations"]


class MetricsWriter:
    """Append-only CSV; the header is written once when the file is created."""

    def __init__(self, path, step_loss_columns: int = 0):
        self.path = path
        self.columns = METRIC_COLUMNS + [f"step_loss_{i}" for i in range(1, step_loss_columns + 1)]
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def write(self, epoch, split, loss, accuracy, lr, peak, step_losses=()):
        row = [epoch, split, f"{loss:.10g}", f"{accuracy:.6f}", f"{lr:.10g}", peak]
        extra = len(self.columns) - len(METRIC_COLUMNS)
        vals = [f"{v:.10g}" if v is not None and not np.isnan(v) else "" for v in list(step_losses)[:extra]]
        row += vals + [""] * (extra - len(vals))
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)
