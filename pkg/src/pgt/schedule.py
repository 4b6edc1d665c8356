"""Progressive schedules: frame ranges with a one-frame overlap, plus DPR draws."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ScheduleError

DPR_SCALES = {
    "A": (0.75, 1.0, 1.25),
    "B": (0.5, 0.75, 1.0),
}


@dataclass(frozen=True)
class ProgressiveSchedule:
    step_length: int
    num_steps: int
    step_ranges: tuple[tuple[int, int], ...]
    overlap: int = 1

    @property
    def total_length(self) -> int:
        return self.step_ranges[-1][1]

    def __iter__(self):
        return iter(self.step_ranges)

    def __len__(self):
        return self.num_steps


def total_frames(step_length: int, num_steps: int) -> int:
    return (step_length - 1) * num_steps + 1


def make_schedule(total: int | None, step_length: int, num_steps: int) -> ProgressiveSchedule:
    """Plan ``num_steps`` ranges of ``step_length`` frames, adjacent ranges sharing one frame.

    ``total`` may be None to derive it; otherwise it must equal
    ``(step_length - 1) * num_steps + 1``.
    """
    if step_length < 2:
        raise ScheduleError(f"step length must be >= 2, got {step_length}")
    if num_steps < 1:
        raise ScheduleError(f"number of steps must be >= 1, got {num_steps}")
    expected = total_frames(step_length, num_steps)
    if total is not None and total != expected:
        raise ScheduleError(
            f"T={total} is inconsistent with T'={step_length}, P={num_steps}; expected T={expected}")
    stride = step_length - 1
    ranges = tuple((p * stride, p * stride + step_length) for p in range(num_steps))
    return ProgressiveSchedule(step_length, num_steps, ranges)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DprMode:
    """Dynamic progressive regularization settings; ``kind`` is Off, A or B."""

    kind: str
    base_length: int
    base_total: int

    def __post_init__(self):
        if self.kind not in ("Off", "A", "B"):
            raise ConfigError(f"unknown DPR mode {self.kind!r}", key="schedule.dpr")

    def choices(self) -> tuple[int, ...]:
        if self.kind == "Off":
            return (self.base_length,)
        return tuple(round_half_up(s * self.base_length) for s in DPR_SCALES[self.kind])


def steps_for(base_total: int, step_length: int) -> int:
    """``P = round((T_b - 1) / (T' - 1))``, at least 1."""
    return max(1, round_half_up((base_total - 1) / (step_length - 1)))


def dpr_sample(mode: DprMode, rng: np.random.Generator) -> tuple[int, int, ProgressiveSchedule]:
    """Draw T' uniformly from the mode's choice set and derive (P, schedule)."""
    if mode.kind == "Off":
        raise ConfigError("dpr_sample needs DPR mode A or B", key="schedule.dpr")
    choices = mode.choices()
    if min(choices) < 2:
        raise ConfigError(f"DPR choice set {choices} contains a step length below 2", key="schedule.base_length")
    t = choices[int(rng.integers(len(choices)))]
    p = steps_for(mode.base_total, t)
    return t, p, make_schedule(None, t, p)


def fit_sequence(sequence: np.ndarray, total: int, rng: np.random.Generator | None = None,
                 time_axis: int = 0) -> np.ndarray:
    """Cyclically extend, or randomly crop, ``sequence`` to ``total`` frames."""
    n = sequence.shape[time_axis]
    if n == total:
        return sequence
    if n > total:
        start = 0 if rng is None else int(rng.integers(n - total + 1))
        idx = np.arange(start, start + total)
    else:
        idx = np.arange(total) % n
    return np.take(sequence, idx, axis=time_axis)
