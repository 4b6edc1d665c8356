"""``pgt`` command line: train, evaluate, verify, erf, membench, gendata.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error (including a
missing checkpoint), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import io
import logging
import os
import sys
import zipfile

import numpy as np

from . import config as cfgmod
from .analysis import Dataset, compute_erf, gen_synthetic_dataset, peak_activation_memory, write_erf_csv, \
    write_memory_csv
from .errors import ConfigError, NumericError, PGTError
from .experiment import evaluate, fit
from .layers import Model
from .schedule import make_schedule
from .training import load_checkpoint

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pgt")


# ---------------------------------------------------------------- data files

def save_dataset(path, splits: dict[str, Dataset]) -> None:
    """npz with fixed zip timestamps, so equal data gives equal file bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for split in ("train", "val"):
            for part in ("x", "y"):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, getattr(splits[split], part), allow_pickle=False)
                info = zipfile.ZipInfo(f"{split}_{part}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, buf.getvalue())


def load_dataset(path) -> dict[str, Dataset]:
    try:
        with np.load(path) as z:
            return {s: Dataset(z[f"{s}_x"], z[f"{s}_y"]) for s in ("train", "val")}
    except (OSError, KeyError) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}", key="io.data") from exc


def run_data(cfg: cfgmod.RunConfig) -> dict[str, Dataset]:
    if cfg.io.data:
        return load_dataset(cfg.io.data)
    return gen_synthetic_dataset(cfg.task_spec(), cfg.seed)


def _config(args) -> cfgmod.RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    cfg = cfgmod.load(args.config, overrides) if args.config else cfgmod.loads("", overrides)
    cfg.validate()
    return cfg


def _require(path) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} not found", key="checkpoint")
    return path


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config(args)
    os.makedirs(cfg.io.out_dir, exist_ok=True)
    with open(os.path.join(cfg.io.out_dir, "run.cfg"), "w") as fh:
        fh.write(cfgmod.dumps(cfg))
    ckpt = cfg.path("checkpoint")
    metrics = cfg.path("metrics")
    if args.resume:
        _require(ckpt)
    elif os.path.exists(metrics):
        os.remove(metrics)
    model = Model(cfg.model_spec(), seed=cfg.seed)
    history = fit(model, run_data(cfg), cfg.train_config(), cfg.schedule, metrics_path=metrics,
                  checkpoint_path=ckpt, resume=args.resume, stop_after=args.stop_after)
    if history:
        last = history[-1]
        print(f"epoch {last['epoch']}: train loss {last['loss']:.6f} val accuracy {last['val_accuracy']:.4f}")
    print(f"checkpoint {ckpt}\nmetrics {metrics}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model, meta = load_checkpoint(_require(args.checkpoint or cfg.path("checkpoint")))
    sched = cfg.schedule
    if args.mode:
        sched = type(sched)(**{**sched.__dict__, "eval_mode": args.mode})
    loss, acc = evaluate(model, run_data(cfg)["val"], sched.inference_mode())
    print(f"val loss {loss:.6f} accuracy {acc:.4f} (mode {sched.inference_mode().kind}, epoch {meta.get('epoch')})")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite
    dtype = {"f64": "float64", "f32": "float32"}[args.dtype]
    results = run_suite(seed=args.seed or 0, dtype=dtype, break_truncation=args.break_truncation)
    for r in results:
        print(r.line())
    failed = [r.id for r in results if not r.passed]
    if failed:
        print("violated: " + ", ".join(failed))
        return EXIT_VERIFY
    print("all invariants hold")
    return EXIT_OK


def cmd_erf(args) -> int:
    cfg = _config(args)
    models = [load_checkpoint(_require(p))[0] for p in args.checkpoints]
    x = run_data(cfg)["val"].x[:args.samples]
    target = args.target if args.target is not None else x.shape[1] // 2
    os.makedirs(args.out_dir, exist_ok=True)
    widths = []
    for i, (path, model) in enumerate(zip(args.checkpoints, models)):
        prof = compute_erf(model, x, target, args.theta)
        name = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(args.out_dir, f"erf_{i}_{name}.csv")
        write_erf_csv(out, prof)
        widths.append(prof.width)
        print(f"{out}: width {prof.width}")
    ratio = widths[0] / widths[1] if widths[1] else float("inf")
    print(f"erf width ratio {widths[0]}/{widths[1]} = {ratio:.3f} (theta {args.theta}, target frame {target})")
    return EXIT_OK


def cmd_membench(args) -> int:
    cfg = _config(args)
    model = Model(cfg.model_spec(), seed=cfg.seed)
    rows = []
    for p in (1, 2, 4, 8):
        peak = peak_activation_memory(model, None, make_schedule(None, args.step_length, p), batch=args.batch,
                                      seed=cfg.seed)
        rows.append((f"T'={args.step_length},P={p}", peak))
        print(f"T'={args.step_length} P={p}: peak {peak}")
    write_memory_csv(args.out, rows)
    print(args.out)
    return EXIT_OK


def cmd_gendata(args) -> int:
    cfg = _config(args)
    save_dataset(args.out, gen_synthetic_dataset(cfg.task_spec(), cfg.seed))
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgt", description="Progressive training of temporal convnets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, config_required=False):
        p.add_argument("--config", required=config_required, help="run config file (key: type = value)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="override the run seed")
        return p

    p = with_config(sub.add_parser("train", help="train a model from a config"))
    p.add_argument("--resume", action="store_true", help="continue from the configured checkpoint")
    p.add_argument("--stop-after", type=int, help="stop after this many completed epochs")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("evaluate", help="evaluate a checkpoint on the validation split"))
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["orig_long", "pg_long", "multiview"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", help="run the invariant suite on small random models")
    p.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break-truncation", action="store_true", help="test hook: disable stop_gradient")
    p.set_defaults(func=cmd_verify)

    p = with_config(sub.add_parser("erf", help="ERF profiles of two checkpoints and their width ratio"))
    p.add_argument("checkpoints", nargs=2)
    p.add_argument("--target", type=int)
    p.add_argument("--theta", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_erf)

    p = with_config(sub.add_parser("membench", help="peak activations for P in 1,2,4,8"))
    p.add_argument("--step-length", type=int, default=8)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--out", default="memory.csv")
    p.set_defaults(func=cmd_membench)

    p = with_config(sub.add_parser("gendata", help="write the synthetic task as npz"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gendata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if getattr(exc, "key", None) else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PGTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
