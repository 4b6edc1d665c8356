import numpy as np
import pytest
from hypothesis import given, strategies as st

from pgt.errors import ConfigError, ScheduleError
from pgt.schedule import DprMode, dpr_sample, fit_sequence, make_schedule, round_half_up, steps_for


def test_schedule_examples():
    s = make_schedule(36, 8, 5)
    assert s.step_ranges == ((0, 8), (7, 15), (14, 22), (21, 29), (28, 36))
    assert make_schedule(2, 2, 1).step_ranges == ((0, 2),)
    assert make_schedule(None, 16, 5).total_length == 76


def test_schedule_inconsistent_total_names_expected():
    with pytest.raises(ScheduleError, match="expected T=36"):
        make_schedule(40, 8, 5)
    with pytest.raises(ScheduleError):
        make_schedule(None, 1, 3)
    with pytest.raises(ScheduleError):
        make_schedule(None, 4, 0)


@given(st.integers(2, 32), st.integers(1, 12))
def test_schedule_covers_with_one_frame_overlap(t, p):
    s = make_schedule(None, t, p)
    assert s.total_length == (t - 1) * p + 1
    assert s.step_ranges[0][0] == 0
    for (a0, b0), (a1, b1) in zip(s.step_ranges, s.step_ranges[1:]):
        assert b0 - a1 == 1 and b1 - a1 == t


def test_dpr_examples():
    assert steps_for(36, 4) == 12 and make_schedule(None, 4, 12).total_length == 37
    assert steps_for(36, 8) == 5
    assert steps_for(36, 6) == 7 and make_schedule(None, 6, 7).total_length == 36
    assert DprMode("A", 8, 36).choices() == (6, 8, 10)
    assert DprMode("B", 8, 36).choices() == (4, 6, 8)


def test_rounding_ties_up():
    assert round_half_up(2.5) == 3 and round_half_up(3.5) == 4
    assert DprMode("A", 10, 46).choices() == (8, 10, 13)  # 7.5 -> 8, 12.5 -> 13


def test_dpr_errors():
    with pytest.raises(ConfigError):
        dpr_sample(DprMode("Off", 8, 36), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        dpr_sample(DprMode("B", 2, 10), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        DprMode("C", 8, 36)


def test_dpr_seed_reproducible():
    a = [dpr_sample(DprMode("A", 8, 36), np.random.default_rng(5))[0] for _ in range(1)]
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    d1 = [dpr_sample(DprMode("B", 8, 36), r1)[:2] for _ in range(50)]
    d2 = [dpr_sample(DprMode("B", 8, 36), r2)[:2] for _ in range(50)]
    assert d1 == d2 and a


@given(st.sampled_from(["A", "B"]), st.sampled_from([4, 8, 12, 16]), st.integers(1, 8), st.integers(0, 1000))
def test_dpr_total_stays_close(kind, base, p_base, seed):
    total = (base - 1) * p_base + 1
    t, p, s = dpr_sample(DprMode(kind, base, total), np.random.default_rng(seed))
    assert abs(s.total_length - total) <= t - 1
    assert p == max(1, round_half_up((total - 1) / (t - 1)))


def test_fit_sequence_extend_and_crop():
    x = np.arange(5)
    assert fit_sequence(x, 8).tolist() == [0, 1, 2, 3, 4, 0, 1, 2]
    crop = fit_sequence(np.arange(10), 4, np.random.default_rng(0))
    assert len(crop) == 4 and np.all(np.diff(crop) == 1)
    batch = np.arange(12).reshape(2, 6)
    assert fit_sequence(batch, 8, time_axis=1).shape == (2, 8)
