"""Operator entry point: dataset generation, training, sampling, evaluation,
and schedule inspection.

Every command is deterministic given its flags; seeds are explicit. The
fully resolved configuration is echoed next to each command's outputs
(run_config.json in output directories, <file>.run_config.json beside file
outputs). Failures print exactly one "error: ..." line on stderr and exit
with a stable code: 2 invalid flags or ranges, 3 I/O or dataset failure,
4 solver failure, 5 non-finite training loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from smokediff import data as dataio
from smokediff import fluid, metrics
from smokediff.ddpm import ancestral_sample, build_condition, make_schedule
from smokediff.rng import derive_seed
from smokediff.train import (
    Checkpoint,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    train,
)
from smokediff.unet import UNet, UNetConfig

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SOLVER = 4
EXIT_DIVERGED = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


_TRAIN_KEYS = {
    "epochs", "batch_size", "base_lr", "T", "beta_start", "beta_end",
    "seed", "time_input", "checkpoint_every", "grad_clip",
}
_UNET_KEYS = {
    "levels", "base_channels", "channel_mult", "groups", "time_embed_dim",
    "attention_levels",
}


def _load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config file: {e}")
    except json.JSONDecodeError as e:
        raise CliError(EXIT_USAGE, f"config file is not valid JSON: {e}")
    unknown = set(raw) - _TRAIN_KEYS - _UNET_KEYS
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown config keys: {sorted(unknown)}")
    return raw


def _echo_config(target: Path, payload: dict, is_dir: bool) -> None:
    echo = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if is_dir:
        target.mkdir(parents=True, exist_ok=True)
        (target / "run_config.json").write_text(echo)
    else:
        target.parent.mkdir(parents=True, exist_ok=True)
        Path(str(target) + ".run_config.json").write_text(echo)


def _resolved(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


def cmd_gen_data(args) -> int:
    try:
        params = fluid.SimParams(
            size=(args.size[0], args.size[1]),
            nu=args.nu,
            eta=args.eta,
            dt=args.dt,
            total_time=args.total_time,
            record_every=args.record_every,
        )
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e))
    out = Path(args.out)
    _echo_config(out, {"command": "gen-data", **_resolved(
        args, ["scenes", "size", "total_time", "record_every", "seed", "nu", "eta", "dt", "split", "out"]
    )}, is_dir=True)
    try:
        dataio.generate_dataset(params, args.scenes, args.seed, out, split_ratio=tuple(args.split))
    except fluid.SolverError as e:
        raise CliError(EXIT_SOLVER, f"solver failure: {e}")
    except dataio.DatasetError as e:
        raise CliError(EXIT_SOLVER if "solver" in str(e) else EXIT_IO, str(e))
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e))
    except OSError as e:
        raise CliError(EXIT_IO, str(e))
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    train_kwargs = {k: v for k, v in file_cfg.items() if k in _TRAIN_KEYS}
    unet_kwargs = {k: v for k, v in file_cfg.items() if k in _UNET_KEYS}
    # flags win over config-file values
    for flag, key in [
        ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "base_lr"),
        ("T", "T"), ("seed", "seed"), ("time_input", "time_input"),
        ("checkpoint_every", "checkpoint_every"),
    ]:
        v = getattr(args, flag)
        if v is not None:
            train_kwargs[key] = v
    for key in ("channel_mult", "attention_levels"):
        if key in unet_kwargs:
            unet_kwargs[key] = tuple(unet_kwargs[key])
    try:
        train_cfg = TrainConfig(**train_kwargs)
        unet_cfg = UNetConfig(**unet_kwargs)
    except (TypeError, ValueError) as e:
        raise CliError(EXIT_USAGE, f"bad configuration: {e}")

    try:
        ds = dataio.SmokeDataset(args.data)
        ds.verify()
    except dataio.DatasetError as e:
        raise CliError(EXIT_IO, str(e))
    samples = ds.samples("train")

    out = Path(args.out)
    _echo_config(out, {
        "command": "train", "data": str(args.data), "out": str(args.out),
        "train": asdict(train_cfg), "unet": asdict(unet_cfg),
        "resume": str(args.resume) if args.resume else None,
    }, is_dir=True)

    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except (OSError, dataio.TensorFormatError, KeyError) as e:
            raise CliError(EXIT_IO, f"cannot load checkpoint: {e}")
    try:
        train(samples, ds.stats, train_cfg, unet_cfg, out_dir=out, resume=resume)
    except TrainingDivergedError as e:
        raise CliError(EXIT_DIVERGED, str(e))
    return 0


def _load_checkpoint_or_die(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except (OSError, dataio.TensorFormatError, KeyError, json.JSONDecodeError) as e:
        raise CliError(EXIT_IO, f"cannot load checkpoint: {e}")


def cmd_sample(args) -> int:
    ckpt = _load_checkpoint_or_die(args.checkpoint)
    if not 0.0 <= args.tau <= ckpt.total_time:
        raise CliError(EXIT_USAGE, f"tau={args.tau} outside [0, {ckpt.total_time}]")
    try:
        rho0 = dataio.read_tensor(args.rho0).data
    except (OSError, dataio.TensorFormatError) as e:
        raise CliError(EXIT_IO, f"cannot read rho0: {e}")
    if rho0.shape != ckpt.grid:
        raise CliError(EXIT_USAGE, f"rho0 shape {rho0.shape} != checkpoint grid {ckpt.grid}")
    out = Path(args.out)
    _echo_config(out, {"command": "sample", **_resolved(args, ["checkpoint", "rho0", "tau", "seed", "out"])}, is_dir=False)
    sched = ckpt.sched
    net = UNet(ckpt.unet_cfg, ckpt.params, sched, ckpt.train_cfg.time_input)
    y = build_condition(rho0, args.tau, ckpt.total_time)
    x = ancestral_sample(net.predictor(), y, sched, seed=args.seed)
    pred = dataio.denormalize(x, ckpt.stats).astype(np.float32)
    dataio.write_tensor(out, pred)
    return 0


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint_or_die(args.checkpoint)
    try:
        ds = dataio.SmokeDataset(args.data)
        ds.verify()
    except dataio.DatasetError as e:
        raise CliError(EXIT_IO, str(e))
    out = Path(args.out)
    _echo_config(out, {"command": "eval", **_resolved(
        args, ["checkpoint", "data", "split", "samples_per_case", "seed", "oracle", "out"]
    )}, is_dir=True)

    sched = ckpt.sched
    net = UNet(ckpt.unet_cfg, ckpt.params, sched, ckpt.train_cfg.time_input)
    predictor = net.predictor()
    preds_by_tau: dict[float, list] = {}
    truth_by_tau: dict[float, list] = {}
    case = 0
    for idx in ds.split_indices(args.split):
        rec = ds.scene(idx)
        for k, tau in enumerate(rec.taus):
            truth = np.stack([rec.ux[k], rec.uy[k]]).astype(np.float64)
            if args.oracle:
                pred = truth
            else:
                y = build_condition(rec.rho0, tau, ds.total_time)
                acc = np.zeros_like(truth)
                for m in range(args.samples_per_case):
                    acc += ancestral_sample(
                        predictor, y, sched, seed=derive_seed(args.seed, case * 100000 + m)
                    )
                pred = dataio.denormalize(acc / args.samples_per_case, ckpt.stats)
            preds_by_tau.setdefault(tau, []).append(pred)
            truth_by_tau.setdefault(tau, []).append(truth)
            case += 1
    report = metrics.build_report(preds_by_tau, truth_by_tau)
    metrics.write_metrics_csv(report, out / "metrics.csv")
    metrics.write_histogram_csv(report, out)
    return 0


def cmd_schedule(args) -> int:
    try:
        sched = make_schedule(args.T, args.beta_start, args.beta_end)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e))
    out = Path(args.out)
    _echo_config(out, {"command": "schedule", **_resolved(args, ["T", "beta_start", "beta_end", "out"])}, is_dir=False)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "beta", "alpha", "alpha_bar", "sigma2"])
        for t in range(1, sched.T + 1):
            writer.writerow([
                t,
                repr(float(sched.beta[t - 1])),
                repr(float(sched.alpha[t - 1])),
                repr(float(sched.alpha_bar[t])),
                repr(float(sched.sigma2[t])),
            ])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smokediff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate smoke scenes into a dataset directory")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--size", type=int, nargs=2, required=True, metavar=("H", "W"))
    g.add_argument("--total-time", type=float, required=True, dest="total_time")
    g.add_argument("--record-every", type=float, required=True, dest="record_every")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--nu", type=float, default=0.03)
    g.add_argument("--eta", type=float, default=0.5)
    g.add_argument("--dt", type=float, default=0.1)
    g.add_argument("--split", type=int, nargs=2, default=[4, 1], metavar=("TRAIN", "TEST"))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the conditional denoiser on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="JSON file with TrainConfig/UNetConfig fields")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--T", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--time-input", choices=["integer", "normalized"], default=None, dest="time_input")
    t.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")
    t.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw one conditional velocity prediction")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--rho0", required=True, help="initial-density tensor file (.fdt)")
    s.add_argument("--tau", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="sample the test split and report MAE/RMSE CSVs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--samples-per-case", type=int, default=1, dest="samples_per_case")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--oracle", action="store_true", help="score the truth against itself (pipeline check)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("schedule", help="dump the noise-schedule constants as CSV")
    c.add_argument("--T", type=int, required=True)
    c.add_argument("--beta-start", type=float, required=True, dest="beta_start")
    c.add_argument("--beta-end", type=float, required=True, dest="beta_end")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except fluid.SolverError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
