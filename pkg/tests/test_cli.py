import csv
import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from pgt import config as cfgmod
from pgt.cli import main
from pgt.errors import ConfigError

TINY = """\
# small and quick
model.layers: str[] = temporal:4:3:pmco, relu
train.epochs: int = 2
train.warmup_epochs = 1
train.batch_size = 16
task.n_train = 32
task.n_val = 16
"""


@pytest.fixture
def run_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY + f"io.out_dir = {tmp_path / 'out'}\n")
    return path


def test_config_roundtrip_default_and_file(run_cfg):
    for cfg in (cfgmod.RunConfig(), cfgmod.load(run_cfg)):
        text = cfgmod.dumps(cfg)
        assert cfgmod.dumps(cfgmod.loads(text)) == text


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-6, 10, allow_nan=False), st.integers(1, 9), st.sampled_from(["Off", "A", "B"]),
       st.lists(st.sampled_from(["relu", "norm", "temporal:4:3:pmco@0.9", "pointwise:3"]), min_size=1, max_size=4),
       st.integers(0, 2**31))
def test_config_roundtrip_property(lr, p, dpr, layers, seed):
    cfg = cfgmod.loads("", [f"train.lr={lr!r}", f"schedule.P={p}", f"schedule.dpr={dpr}",
                            "model.layers=" + ",".join(layers), f"seed={seed}"])
    text = cfgmod.dumps(cfg)
    assert cfgmod.dumps(cfgmod.loads(text)) == text
    assert cfgmod.loads(text).train.lr == lr


def test_config_aliases_and_errors():
    cfg = cfgmod.loads("schedule.P: int = 3\nschedule.T_prime = 6\n")
    assert cfg.schedule.num_steps == 3 and cfg.schedule.step_length == 6
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads("train.nope = 1")
    assert exc.value.key == "train.nope"
    with pytest.raises(ConfigError):
        cfgmod.loads("train.lr: int = 1")
    with pytest.raises(ConfigError):
        cfgmod.loads("train.epochs = many")
    with pytest.raises(ConfigError):
        cfgmod.loads("just words")


def test_config_validate_rejects_long_schedule():
    with pytest.raises(ConfigError):
        cfgmod.loads("schedule.P = 9").validate()


def read_rows(path):
    return list(csv.DictReader(open(path)))


def test_train_pgt_and_baseline_metrics(run_cfg, tmp_path, capsys):
    assert main(["train", "--config", str(run_cfg), "--set", "schedule.dpr=B"]) == 0
    rows = read_rows(tmp_path / "out" / "metrics.csv")
    assert [r["split"] for r in rows] == ["train", "val", "train", "val"]
    assert "step_loss_1" in rows[0] and rows[0]["step_loss_1"] != ""
    assert main(["train", "--config", str(run_cfg), "--set", "schedule.regime=clip", "--set", "schedule.P=1",
                 "--set", "io.metrics=base.csv", "--set", "io.checkpoint=base.pgtc"]) == 0
    base = read_rows(tmp_path / "out" / "base.csv")
    assert len(base) == 4 and "step_loss_1" not in base[0]
    assert (tmp_path / "out" / "run.cfg").exists()


def test_train_resume_matches_uninterrupted(run_cfg, tmp_path):
    common = ["--config", str(run_cfg), "--set", "train.epochs=3"]
    assert main(["train", *common, "--set", "io.metrics=full.csv", "--set", "io.checkpoint=full.pgtc"]) == 0
    assert main(["train", *common, "--stop-after", "1"]) == 0
    assert main(["train", *common, "--resume"]) == 0
    full = [r for r in read_rows(tmp_path / "out" / "full.csv") if r["split"] == "train"]
    part = [r for r in read_rows(tmp_path / "out" / "metrics.csv") if r["split"] == "train"]
    assert [r["epoch"] for r in part] == ["0", "1", "2"]
    for a, b in zip(full, part):
        assert abs(float(a["loss"]) - float(b["loss"])) <= 1e-6


def test_train_exit_codes(run_cfg, tmp_path, capsys):
    assert main(["train", "--config", str(run_cfg), "--set", "train.bogus=1"]) == 2
    assert "train.bogus" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["train", "--config", str(run_cfg), "--resume", "--set", "io.checkpoint=none.pgtc"]) == 2
    assert main(["train", "--config", str(run_cfg), "--set", "train.lr=1e300"]) == 3
    assert main(["frobnicate"]) == 2


def test_evaluate_and_missing_checkpoint(run_cfg, tmp_path, capsys):
    assert main(["evaluate", "--config", str(run_cfg)]) == 2
    main(["train", "--config", str(run_cfg)])
    capsys.readouterr()
    assert main(["evaluate", "--config", str(run_cfg), "--mode", "orig_long"]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_verify_command(capsys):
    assert main(["verify"]) == 0
    assert "all invariants hold" in capsys.readouterr().out
    assert main(["verify", "--break-truncation"]) == 1
    out = capsys.readouterr().out
    assert "FAIL C2" in out and "violated: C2" in out
    assert main(["verify", "--dtype", "f32"]) == 0
    assert "(tol 1e-05)" in capsys.readouterr().out


def test_erf_command(run_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    main(["train", "--config", str(run_cfg)])
    main(["train", "--config", str(run_cfg), "--set", "schedule.regime=clip", "--set", "io.checkpoint=b.pgtc"])
    capsys.readouterr()
    assert main(["erf", "--config", str(run_cfg), str(out / "model.pgtc"), str(out / "b.pgtc"),
                 "--out-dir", str(tmp_path / "erf")]) == 0
    text = capsys.readouterr().out
    assert "erf width ratio" in text
    assert len(list((tmp_path / "erf").glob("*.csv"))) == 2
    assert main(["erf", "--config", str(run_cfg), "nope.pgtc", str(out / "b.pgtc")]) == 2


def test_membench_four_rows(run_cfg, tmp_path):
    path = tmp_path / "mem.csv"
    assert main(["membench", "--config", str(run_cfg), "--out", str(path)]) == 0
    rows = read_rows(path)
    assert len(rows) == 4 and [r["config"] for r in rows][-1] == "T'=8,P=8"


def test_gendata_deterministic(run_cfg, tmp_path):
    digests = []
    for name in ("a.npz", "b.npz"):
        assert main(["gendata", "--config", str(run_cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
        digests.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    main(["gendata", "--config", str(run_cfg), "--seed", "8", "--out", str(tmp_path / "c.npz")])
    assert hashlib.sha256((tmp_path / "c.npz").read_bytes()).hexdigest() != digests[0]


def test_train_from_generated_data(run_cfg, tmp_path):
    data = tmp_path / "d.npz"
    main(["gendata", "--config", str(run_cfg), "--out", str(data)])
    assert main(["train", "--config", str(run_cfg), "--set", f"io.data={data}"]) == 0


def test_seed_override_determines_outputs(run_cfg, tmp_path):
    for name in ("s1", "s2"):
        main(["train", "--config", str(run_cfg), "--seed", "5", "--set", f"io.metrics={name}.csv"])
    assert (tmp_path / "out" / "s1.csv").read_text() == (tmp_path / "out" / "s2.csv").read_text()
