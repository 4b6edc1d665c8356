"""Inference modes, the one-pass Markov layout oracle, ERF, memory profiling, synthetic data."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ScheduleError, ShapeError
from .layers import Model, OperatorVariant, _conv, local_temporal_conv
from .schedule import ProgressiveSchedule
from .training import integrated_backward, progressive_backward


# ---------------------------------------------------------------- inference

@dataclass(frozen=True)
class InferenceMode:
    """``orig_long``, ``pg_long`` (needs ``schedule``) or ``multiview``."""

    kind: str = "orig_long"
    schedule: ProgressiveSchedule | None = None
    num_views: int = 1
    clip_length: int = 8
    aggregation: str = "mean"

    def __post_init__(self):
        if self.kind not in ("orig_long", "pg_long", "multiview"):
            raise ConfigError(f"unknown inference mode {self.kind!r}")
        if self.aggregation not in ("mean", "max"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.kind == "pg_long" and self.schedule is None:
            raise ConfigError("pg_long inference needs a schedule")


def _aggregate(stack, how):
    # sorting first makes the mean independent of view order, bit for bit
    stack = np.sort(np.stack(stack), axis=0)
    return stack.mean(axis=0) if how == "mean" else stack.max(axis=0)


def progressive_step_logits(model: Model, x: np.ndarray, schedule: ProgressiveSchedule) -> list[np.ndarray]:
    """Per-step logits of the step-by-step Markov forward on a batch ``x``."""
    state = model.initial_state()
    out = []
    for a, b in schedule.step_ranges:
        feats, state = model.features(ad.constant(x[:, a:b]), state)
        out.append(model.head(feats).value)
    return out


def view_starts(total: int, clip_length: int, num_views: int) -> list[int]:
    if num_views == 1:
        return [(total - clip_length) // 2]
    return [int(round(s)) for s in np.linspace(0, total - clip_length, num_views)]


def infer(model: Model, sequence, mode: InferenceMode) -> np.ndarray:
    """Logits for a sequence (``[K]``) or batch (``[B, K]``)."""
    x, batched = model.batch(sequence)
    t = x.shape[1]
    if mode.kind == "orig_long":
        feats, _ = model.features(ad.constant(x))
        logits = model.head(feats).value
    elif mode.kind == "pg_long":
        sched = mode.schedule
        if t < sched.step_length or t != sched.total_length:
            raise ScheduleError(f"sequence of {t} frames does not match a schedule covering {sched.total_length}")
        logits = _aggregate(progressive_step_logits(model, x, sched), mode.aggregation)
    else:
        if t < mode.clip_length:
            raise ScheduleError(f"sequence of {t} frames is shorter than one {mode.clip_length}-frame clip")
        views = []
        for s in view_starts(t, mode.clip_length, mode.num_views):
            feats, _ = model.features(ad.constant(x[:, s:s + mode.clip_length]))
            views.append(model.head(feats).value)
        logits = _aggregate(views, mode.aggregation)
    return logits if batched else logits[0]


def accuracy(model: Model, x, y, mode: InferenceMode, batch_size: int = 256) -> float:
    hits = 0
    for i in range(0, len(y), batch_size):
        logits = infer(model, x[i:i + batch_size], mode)
        hits += int(np.sum(np.argmax(logits, axis=-1) == y[i:i + batch_size]))
    return hits / len(y)


# ---------------------------------------------------------------- one-pass oracle

def _block_carries(x: ad.Node, variant: OperatorVariant) -> ad.Node:
    """Past taps for every block of ``x`` ([B, P, T', C, ...]) as one graph."""
    b, p = x.value.shape[:2]
    zero = ad.constant(np.zeros((b, 1, 1) + x.value.shape[3:], dtype=x.value.dtype))
    if p == 1:
        return zero
    prev = x[:, :-1]
    if variant.kind == "mco":
        carry = prev[:, :, -1:]
    elif variant.kind == "cmco" and variant.pool == "max":
        pooled = ad.amax(prev, axis=2)
        carry = ad.reshape(pooled, pooled.value.shape[:2] + (1,) + pooled.value.shape[2:])
    else:
        carry = ad.mean(prev, axis=2, keepdims=True)
        if variant.kind == "pmco":
            moms = [carry[:, 0:1]]
            for j in range(1, p - 1):
                moms.append(ad.scale(moms[-1], variant.alpha) + ad.scale(carry[:, j:j + 1], 1.0 - variant.alpha))
            carry = ad.concat(moms, axis=1)
    return ad.concat([zero, carry], axis=1)


@dataclass
class OnePassResult:
    features: ad.Node  # [B, P, T', C, ...]
    logits: ad.Node  # [B, P, K]
    carries: dict[int, np.ndarray]
    inputs: ad.Node  # [B, P, T', C, ...]


def one_pass_markov_forward(model: Model, sequence, schedule: ProgressiveSchedule,
                            frozen_carries: dict[int, np.ndarray] | None = None,
                            differentiable_input: bool = False) -> OnePassResult:
    """Evaluate the Markov operator layout over all steps at once, layer by layer.

    Steps are stacked on a new axis and every temporal layer handles all of
    them in a single operation, with the carried past taps built from the
    previous block's layer input and wrapped in ``stop_gradient``.  Passing
    ``frozen_carries`` replaces those taps by constants, which is how the
    truncated graph is expressed as an ordinary function for finite
    differences.  ``differentiable_input`` makes the stacked step inputs a
    leaf whose gradient can be inspected.
    """
    x, _ = model.batch(sequence)
    if x.shape[1] != schedule.total_length:
        raise ScheduleError(f"sequence has {x.shape[1]} frames, schedule covers {schedule.total_length}")
    blocks = np.stack([x[:, a:b] for a, b in schedule.step_ranges], axis=1)
    h = inputs = ad.leaf(blocks) if differentiable_input else ad.constant(blocks)
    carries = {}
    for i, layer in enumerate(model.spec.layers):
        if layer.type != "temporal":
            h = model.frame_layer(i, h, time_axis=2)
            continue
        tp = model.temporal[i]
        if not layer.variant.markov:
            h = local_temporal_conv(h, tp, time_axis=2)
            continue
        if frozen_carries is not None:
            carry = ad.constant(frozen_carries[i])
        else:
            carry = _block_carries(h, layer.variant)
        carries[i] = carry.value
        future = ad.constant(np.zeros_like(carry.value))
        h = _conv(h, tp, ad.stop_gradient(carry), future, time_axis=2)
    axes = (2,) + tuple(range(4, h.value.ndim))
    pooled = ad.mean(h, axis=axes)
    logits = ad.mix(pooled, model.params["head.weight"], axis=-1) + model.params["head.bias"]
    return OnePassResult(h, logits, carries, inputs)


def one_pass_loss(result: OnePassResult, labels, loss_aggregation: str = "per_step_mean") -> ad.Node:
    p = result.logits.value.shape[1]
    total = None
    for j in range(p):
        term = ad.cross_entropy(result.logits[:, j], labels)
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / p) if loss_aggregation == "per_step_mean" else total


def default_tolerance(dtype) -> float:
    return 1e-10 if np.dtype(dtype) == np.float64 else 1e-5


def forward_equivalence_check(model: Model, sequence, schedule: ProgressiveSchedule, tol: float | None = None) -> dict:
    """Compare step-by-step outputs with the one-pass layout evaluation."""
    if tol is None:
        tol = default_tolerance(model.dtype)
    x, _ = model.batch(sequence)
    ref = one_pass_markov_forward(model, x, schedule)
    state = model.initial_state()
    diff = 0.0
    for j, (a, b) in enumerate(schedule.step_ranges):
        feats, state = model.features(ad.constant(x[:, a:b]), state)
        logits = model.head(feats)
        diff = max(diff,
                   float(np.max(np.abs(feats.value - ref.features.value[:, j]))),
                   float(np.max(np.abs(logits.value - ref.logits.value[:, j]))))
    return {"max_abs_diff": diff, "tol": tol, "pass": diff <= tol}


# ---------------------------------------------------------------- ERF

@dataclass
class ErfProfile:
    target_frame: int
    magnitudes: np.ndarray
    width: int
    theta: float


def erf_magnitudes(model: Model, sequence, target_frame: int) -> np.ndarray:
    """Unnormalized per-frame input-gradient magnitude of ||f[target]||."""
    x, _ = model.batch(sequence)
    t = x.shape[1]
    if not 0 <= target_frame < t:
        raise ShapeError(f"target frame {target_frame} outside [0, {t})")
    inp = ad.leaf(x)
    feats, _ = model.features(inp)
    target = feats[:, target_frame]
    sq = target * target
    axes = tuple(range(1, sq.value.ndim))
    norms = ad.power(ad.sum(sq, axis=axes) + x.dtype.type(1e-30), 0.5)
    ad.backward(ad.sum(norms))
    g = inp.grad
    per_item = np.sqrt(np.sum(g * g, axis=tuple(range(2, g.ndim))))
    return per_item.sum(axis=0)


def compute_erf(model: Model, sequence, target_frame: int, theta: float = 0.05) -> ErfProfile:
    """Normalized input-gradient profile through the original-long layout.

    ``sequence`` may be a batch; magnitudes are then summed over the batch.
    Width counts frames whose normalized magnitude exceeds ``theta``.
    """
    mag = erf_magnitudes(model, sequence, target_frame)
    peak = mag.max()
    if peak == 0:
        warnings.warn("zero input gradient everywhere: degenerate model for ERF analysis", RuntimeWarning)
        return ErfProfile(target_frame, mag, 0, theta)
    mag = mag / peak
    return ErfProfile(target_frame, mag, int(np.sum(mag > theta)), theta)


def write_erf_csv(path, profile: ErfProfile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "magnitude"])
        for i, m in enumerate(profile.magnitudes):
            w.writerow([i, f"{m:.10g}"])


# ---------------------------------------------------------------- memory

def peak_activation_memory(model: Model, total: int, schedule: ProgressiveSchedule | None = None,
                           batch: int = 1, seed: int = 0) -> int:
    """Peak simultaneously live activation elements during one training step.

    Runs forward and backward (no parameter update) on random data, either
    integrated over ``total`` frames or progressively under ``schedule``.
    Carried Markov state lives outside the graph and is not counted.
    """
    rng = np.random.default_rng(seed)
    if schedule is not None:
        total = schedule.total_length
    shape = (batch, total, model.spec.in_channels) + tuple(model.spec.spatial)
    x = rng.standard_normal(shape).astype(model.dtype)
    y = rng.integers(model.spec.num_classes, size=batch)
    with ad.track_activations() as tracker:
        if schedule is None:
            integrated_backward(model, x, y)
        else:
            progressive_backward(model, x, y, schedule)
    model.zero_grad()
    return tracker.peak


def write_memory_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "peak_elements"])
        for name, peak in rows:
            w.writerow([name, peak])


# ---------------------------------------------------------------- synthetic task

RULES = ("late", "pair_mod", "pair_product")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Two marker windows far apart; the label is a function of both marker ids.

    ``pair_mod`` labels ``(early + late) mod K``, so either window alone
    carries no information about the class; ``pair_product`` labels the
    ordered pair (K*K classes); ``late`` depends on the late marker only.
    """

    T: int = 36
    C: int = 8
    markers: int = 4
    early: tuple[int, int] = (1, 5)
    late: tuple[int, int] = (29, 33)
    rule: str = "pair_mod"
    noise: float = 0.5
    n_train: int = 1024
    n_val: int = 512
    spatial: tuple[int, ...] = ()

    @property
    def num_classes(self) -> int:
        return self.markers ** 2 if self.rule == "pair_product" else self.markers

    @property
    def separation(self) -> int:
        """Frames strictly between the two windows."""
        return self.late[0] - self.early[1]

    def validate(self, receptive_field: int | None = None) -> None:
        (e0, e1), (l0, l1) = self.early, self.late
        if not (0 <= e0 < e1 <= self.T and 0 <= l0 < l1 <= self.T):
            raise ConfigError("marker windows must lie inside the sequence", key="task")
        if e1 > l0:
            raise ConfigError("early and late marker windows overlap or are out of order", key="task")
        if self.rule not in RULES:
            raise ConfigError(f"unknown rule {self.rule!r}", key="task.rule")
        if self.markers > self.C:
            raise ConfigError("need at least as many channels as marker ids", key="task.markers")
        if receptive_field is not None and self.separation <= receptive_field:
            raise ConfigError(
                f"window separation {self.separation} does not exceed receptive field {receptive_field}",
                key="task")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


def _make_split(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator) -> Dataset:
    k = spec.markers
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    if spec.rule == "pair_product":
        early, late = labels // k, labels % k
    elif spec.rule == "pair_mod":
        early = rng.integers(k, size=n)
        late = (labels - early) % k
    else:
        early = rng.integers(k, size=n)
        late = labels.copy()
    x = spec.noise * rng.standard_normal((n, spec.T, spec.C) + tuple(spec.spatial))
    rows = np.arange(n)
    for (a, b), ids in ((spec.early, early), (spec.late, late)):
        for t in range(a, b):
            x[rows, t, ids] += 1.0
    return Dataset(x, labels.astype(np.int64))


def gen_synthetic_dataset(spec: SyntheticTaskSpec, rng) -> dict[str, Dataset]:
    """Deterministic train/val splits with exactly balanced labels when n is a multiple of the class count."""
    spec.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return {"train": _make_split(spec, spec.n_train, rng), "val": _make_split(spec, spec.n_val, rng)}
