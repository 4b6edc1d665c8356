import csv
import itertools
import warnings

import numpy as np
import pytest

from pgt import autodiff as ad
from pgt.analysis import (InferenceMode, SyntheticTaskSpec, _aggregate, compute_erf, erf_magnitudes,
                          forward_equivalence_check, gen_synthetic_dataset, infer, one_pass_markov_forward,
                          peak_activation_memory, write_erf_csv, write_memory_csv)
from pgt.errors import ConfigError, ScheduleError, ShapeError
from pgt.experiment import ScheduleConfig, fit
from pgt.layers import Model, ModelSpec
from pgt.schedule import make_schedule
from pgt.training import TrainConfig


def model_of(layers, cin=3, classes=4, seed=0, dtype="float64", init="he"):
    return Model(ModelSpec(cin, classes, layers, dtype=dtype, init=init), seed)


THREE = ["temporal:6:3:pmco", "relu", "temporal:6:3:cmco-max", "relu", "temporal:5:3:mco"]


def test_pg_long_p1_equals_orig_long():
    m = model_of(THREE)
    x = np.random.default_rng(0).standard_normal((3, 8, 3))
    pg = infer(m, x, InferenceMode("pg_long", make_schedule(None, 8, 1)))
    assert np.array_equal(pg, infer(m, x, InferenceMode("orig_long")))


def test_multiview_single_full_view_equals_orig_long():
    m = model_of(THREE)
    x = np.random.default_rng(1).standard_normal((2, 12, 3))
    mv = infer(m, x, InferenceMode("multiview", num_views=1, clip_length=12))
    assert np.array_equal(mv, infer(m, x, InferenceMode("orig_long")))


def test_pg_long_mean_equals_hand_average():
    m = model_of(THREE)
    x = np.random.default_rng(2).standard_normal((2, 22, 3))
    sched = make_schedule(None, 8, 3)
    state = m.initial_state()
    per_step = []
    for a, b in sched.step_ranges:
        feats, state = m.features(ad.constant(x[:, a:b]), state)
        per_step.append(m.head(feats).value)
    expected = sum(per_step) / 3
    assert np.allclose(infer(m, x, InferenceMode("pg_long", sched)), expected, rtol=0, atol=1e-14)
    mx = infer(m, x, InferenceMode("pg_long", sched, aggregation="max"))
    assert np.array_equal(mx, np.max(per_step, axis=0))


def test_multiview_permutation_invariant():
    m = model_of(THREE)
    x = np.random.default_rng(3).standard_normal((1, 20, 3))
    views = [m.logits(x[:, s:s + 8])[0].value for s in (0, 6, 12)]
    for how in ("mean", "max"):
        ref = _aggregate(views, how)
        for perm in itertools.permutations(range(3)):
            assert np.array_equal(_aggregate([views[i] for i in perm], how), ref)
        got = infer(m, x, InferenceMode("multiview", num_views=3, clip_length=8, aggregation=how))
        assert np.array_equal(got, ref)


def test_inference_length_errors():
    m = model_of(THREE)
    with pytest.raises(ScheduleError):
        infer(m, np.zeros((1, 5, 3)), InferenceMode("multiview", num_views=2, clip_length=8))
    with pytest.raises(ScheduleError):
        infer(m, np.zeros((1, 20, 3)), InferenceMode("pg_long", make_schedule(None, 8, 3)))
    with pytest.raises(ConfigError):
        InferenceMode("pg_long")


def test_single_sequence_infer_shape():
    m = model_of(THREE)
    assert infer(m, np.zeros((8, 3)), InferenceMode("orig_long")).shape == (4,)


def test_equivalence_examples():
    rng = np.random.default_rng(4)
    m = model_of(THREE)
    r = forward_equivalence_check(m, rng.standard_normal((2, 10, 3)), make_schedule(None, 4, 3))
    assert r["max_abs_diff"] <= 1e-12 and r["pass"]
    r1 = forward_equivalence_check(m, rng.standard_normal((2, 8, 3)), make_schedule(None, 8, 1))
    assert r1["max_abs_diff"] == 0.0
    m32 = model_of(THREE, dtype="float32")
    r32 = forward_equivalence_check(m32, rng.standard_normal((2, 36, 3)), make_schedule(None, 8, 5))
    assert r32["max_abs_diff"] <= 1e-5 and r32["tol"] == 1e-5


def test_one_pass_layout_shapes():
    m = model_of(THREE)
    res = one_pass_markov_forward(m, np.zeros((2, 22, 3)), make_schedule(None, 8, 3))
    assert res.features.value.shape == (2, 3, 8, 5)
    assert res.logits.value.shape == (2, 3, 4)


def test_erf_identity_network_width_one():
    m = model_of(["temporal:3:3:local"], init="center")
    m.params["layers.0.weight"].value[...] = 0
    m.params["layers.0.weight"].value[1] = np.eye(3)
    prof = compute_erf(m, np.random.default_rng(5).standard_normal((4, 20, 3)), 10)
    assert prof.width == 1 and prof.magnitudes[10] == 1.0


def test_erf_width_monotone_in_depth():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((8, 24, 3))
    widths = []
    for depth in (1, 2, 3):
        m = model_of(["temporal:3:3:local"] * depth, seed=7)
        widths.append(compute_erf(m, x, 12).width)
    assert widths[0] <= widths[1] <= widths[2]
    assert widths == [3, 5, 7]


def test_erf_symmetric_for_symmetric_kernels():
    m = model_of(["temporal:3:3:local", "temporal:3:3:local"], seed=1)
    for key in ("layers.0.weight", "layers.1.weight"):
        w = m.params[key].value
        w[2] = w[0]
    x = np.ones((1, 21, 3))
    mag = erf_magnitudes(m, x, 10)
    assert np.allclose(mag[:10], mag[11:][::-1], atol=1e-6)


def test_markov_step_future_side_zero_gradient():
    # frames of the next step reach step p's last frame only through the zero future tap
    m = model_of(["temporal:3:3:mco", "relu", "temporal:3:3:mco"])
    sched = make_schedule(None, 6, 2)
    res = one_pass_markov_forward(m, np.random.default_rng(8).standard_normal((1, 11, 3)), sched,
                                  differentiable_input=True)
    target = res.features[:, 0, 5]
    ad.backward(ad.sum(target * target))
    g = res.inputs.grad
    assert np.all(g[:, 1] == 0)
    assert np.any(g[:, 0, 3:] != 0)


def test_erf_degenerate_model_warns():
    m = model_of(["temporal:3:3:local"])
    for p in m.parameters():
        p.value[...] = 0
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        prof = compute_erf(m, np.ones((1, 10, 3)), 5)
    assert prof.width == 0 and rec
    with pytest.raises(ShapeError):
        compute_erf(model_of(THREE), np.ones((1, 10, 3)), 12)


def test_csv_writers(tmp_path):
    m = model_of(THREE)
    prof = compute_erf(m, np.random.default_rng(9).standard_normal((2, 12, 3)), 6)
    write_erf_csv(tmp_path / "e.csv", prof)
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["frame_index", "magnitude"] and len(rows) == 13
    write_memory_csv(tmp_path / "m.csv", [("a", 1), ("b", 2)])
    assert (tmp_path / "m.csv").read_text().splitlines() == ["config,peak_elements", "a,1", "b,2"]


def test_memory_examples():
    m = model_of(THREE)
    local = Model(m.spec.with_variant("local"), 0)
    t16 = peak_activation_memory(local, 16)
    t32 = peak_activation_memory(local, 32)
    assert abs(t32 / t16 - 2.0) <= 0.05 * 2.0
    peaks = [peak_activation_memory(m, None, make_schedule(None, 8, p)) for p in (2, 4, 8)]
    assert (max(peaks) - min(peaks)) / min(peaks) <= 0.10
    assert peak_activation_memory(m, None, make_schedule(None, 8, 1)) == peak_activation_memory(local, 8)


def test_synthetic_dataset_deterministic_and_balanced():
    spec = SyntheticTaskSpec()
    a, b = gen_synthetic_dataset(spec, 7), gen_synthetic_dataset(spec, 7)
    assert np.array_equal(a["train"].x, b["train"].x) and np.array_equal(a["val"].y, b["val"].y)
    counts = np.bincount(a["train"].y, minlength=spec.num_classes)
    assert np.all(counts == spec.n_train // spec.num_classes)
    assert a["train"].x.shape == (spec.n_train, spec.T, spec.C)


def test_synthetic_pair_mod_marginals_uninformative():
    spec = SyntheticTaskSpec(noise=0.0, n_train=4000, markers=4)
    d = gen_synthetic_dataset(spec, 0)["train"]
    early = d.x[:, spec.early[0]].argmax(axis=1)
    late = d.x[:, spec.late[0]].argmax(axis=1)
    assert np.all((early + late) % 4 == d.y)
    # either window alone: label frequencies conditional on the marker stay near uniform
    for ids in (early, late):
        for k in range(4):
            freq = np.bincount(d.y[ids == k], minlength=4) / np.sum(ids == k)
            assert np.max(np.abs(freq - 0.25)) < 0.06


def test_synthetic_validate():
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(early=(20, 30), late=(10, 15)).validate()
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(markers=9, C=8).validate()
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(early=(1, 5), late=(29, 33)).validate(receptive_field=30)
    SyntheticTaskSpec().validate(receptive_field=7)


def test_late_rule_clip_model_fits_local_pattern():
    spec = SyntheticTaskSpec(T=12, C=4, markers=4, early=(0, 2), late=(6, 10), rule="late", noise=0.0,
                             n_train=64, n_val=32)
    data = gen_synthetic_dataset(spec, 0)
    m = model_of(["temporal:8:3:local", "relu"], cin=4, classes=4)
    cfg = TrainConfig(lr=0.1, epochs=40, warmup_epochs=1, batch_size=16)
    hist = fit(m, data, cfg, ScheduleConfig("clip", 12, 1, eval_mode="orig_long"))
    assert hist[-1]["accuracy"] == 1.0
