"""Epoch loops for progressive (PGT) and clip-based baseline training."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .analysis import Dataset, InferenceMode, accuracy
from .layers import Model
from .schedule import DprMode, dpr_sample, fit_sequence, make_schedule, total_frames
from .training import (SGD, MetricsWriter, TrainConfig, integrated_train_step, load_checkpoint, lr_at,
                       progressive_train_step, save_checkpoint)

log = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    """``regime`` is ``progressive`` (PGT) or ``clip`` (integrated training on random crops)."""

    regime: str = "progressive"
    step_length: int = 8
    num_steps: int = 5
    dpr: str = "Off"
    eval_mode: str = "auto"
    eval_views: int = 5
    eval_aggregation: str = "mean"

    @property
    def total(self) -> int:
        return total_frames(self.step_length, self.num_steps)

    def base_schedule(self):
        return make_schedule(None, self.step_length, self.num_steps)

    def dpr_mode(self) -> DprMode:
        return DprMode(self.dpr, self.step_length, self.total)

    def max_steps(self) -> int:
        if self.regime != "progressive":
            return 0
        if self.dpr == "Off":
            return self.num_steps
        from .schedule import steps_for
        return max(steps_for(self.total, t) for t in self.dpr_mode().choices())

    def inference_mode(self) -> InferenceMode:
        kind = self.eval_mode
        if kind == "auto":
            kind = "pg_long" if self.regime == "progressive" else "multiview"
        return InferenceMode(kind, schedule=self.base_schedule(), num_views=self.eval_views,
                             clip_length=self.step_length, aggregation=self.eval_aggregation)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def random_clips(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    starts = rng.integers(x.shape[1] - length + 1, size=x.shape[0])
    idx = starts[:, None] + np.arange(length)
    return x[np.arange(x.shape[0])[:, None], idx]


def train_epoch(model: Model, data: Dataset, optimizer: SGD, config: TrainConfig, sched: ScheduleConfig,
                epoch: int) -> dict:
    """One pass over ``data``; returns mean loss, train accuracy, per-step losses and peak activations."""
    rng = epoch_rng(config.seed, epoch)
    lr = lr_at(epoch, config)
    order = rng.permutation(len(data))
    n_steps = sched.max_steps()
    step_sums = np.zeros(n_steps)
    step_counts = np.zeros(n_steps)
    total_loss, hits, seen = 0.0, 0, 0
    with ad.track_activations() as tracker:
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            x, y = data.x[idx], data.y[idx]
            if sched.regime == "progressive":
                if sched.dpr == "Off":
                    schedule = sched.base_schedule()
                else:
                    _, _, schedule = dpr_sample(sched.dpr_mode(), rng)
                    x = fit_sequence(x, schedule.total_length, rng, time_axis=1)
                report = progressive_train_step(model, x, y, schedule, optimizer, lr, config.loss_aggregation)
                k = len(report.per_step_losses)
                step_sums[:k] += np.asarray(report.per_step_losses) * len(y)
                step_counts[:k] += len(y)
            else:
                clip = random_clips(x, sched.step_length, rng)
                report = integrated_train_step(model, clip, y, optimizer, lr)
            total_loss += report.loss * len(y)
            hits += int(np.sum(np.argmax(report.logits, axis=-1) == y))
            seen += len(y)
    with np.errstate(invalid="ignore"):
        step_losses = step_sums / step_counts
    return {"loss": total_loss / seen, "accuracy": hits / seen, "lr": lr,
            "peak": tracker.peak, "step_losses": list(step_losses)}


def evaluate(model: Model, data: Dataset, mode: InferenceMode) -> tuple[float, float]:
    """(mean cross-entropy of the aggregated logits, accuracy)."""
    from .analysis import infer
    losses, hits = [], 0
    for i in range(0, len(data), 256):
        logits = infer(model, data.x[i:i + 256], mode)
        y = data.y[i:i + 256]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        losses.append(-logp[np.arange(len(y)), y])
        hits += int(np.sum(np.argmax(logits, axis=1) == y))
    return float(np.concatenate(losses).mean()), hits / len(data)


def fit(model: Model, splits: dict[str, Dataset], config: TrainConfig, sched: ScheduleConfig,
        metrics_path=None, checkpoint_path=None, resume: bool = False, stop_after: int | None = None) -> list[dict]:
    """Train for ``config.epochs`` epochs, evaluating on ``splits['val']`` after each.

    With ``checkpoint_path`` a checkpoint is written after every epoch;
    ``resume`` restarts from it.  ``stop_after`` ends the run early (after
    that many completed epochs) as if interrupted.
    """
    optimizer = SGD.for_model(model, config)
    start = 0
    if resume and checkpoint_path is not None:
        _, meta = load_checkpoint(checkpoint_path, model, optimizer)
        start = meta["epoch"] + 1
    writer = MetricsWriter(metrics_path, sched.max_steps()) if metrics_path else None
    mode = sched.inference_mode()
    history = []
    for epoch in range(start, config.epochs):
        stats = train_epoch(model, splits["train"], optimizer, config, sched, epoch)
        val_loss, val_acc = evaluate(model, splits["val"], mode) if "val" in splits else (float("nan"), float("nan"))
        stats.update(epoch=epoch, val_loss=val_loss, val_accuracy=val_acc)
        history.append(stats)
        log.info("epoch %d loss %.4f acc %.3f val_acc %.3f", epoch, stats["loss"], stats["accuracy"], val_acc)
        if writer:
            writer.write(epoch, "train", stats["loss"], stats["accuracy"], stats["lr"], stats["peak"],
                         stats["step_losses"])
            writer.write(epoch, "val", val_loss, val_acc, stats["lr"], 0)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, optimizer, {"epoch": epoch})
        if stop_after is not None and epoch + 1 >= stop_after:
            break
    return history
