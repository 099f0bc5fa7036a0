"""Command-line interface.

Subcommands: gen-data, pretrain, eval, grid, inspect-checkpoint.
Config precedence is defaults < --config file < HARDVIEWS_OUT env var
< explicit flags.  Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .data import make_shape_dataset, write_dataset
from .errors import ConfigError, DataFormatError, HardviewsError, NumericError
from .train import run_adv_sweep, run_beta_sweep, run_eval, run_grid, run_pretrain


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, type=str, default=None,
                            help=f"override config key {f.name}")


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return load_config(args.config, overrides)


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, count, seed in (("train", args.train_count, args.seed),
                               ("test", args.test_count, args.seed + 1)):
        images, labels = make_shape_dataset(count, size=args.size, seed=seed)
        path = out / f"{split}.hxds"
        write_dataset(path, images, labels)
        print(f"wrote {path} ({count} images, {args.size}x{args.size})")
    return 0


def _cmd_pretrain(args) -> int:
    config = _config_from_args(args)
    result = run_pretrain(config, resume_from=args.resume)
    print(f"run dir: {result.run_dir}")
    print(f"last checkpoint: {result.last_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    config = _config_from_args(args)
    report = run_eval(config, args.checkpoint, protocol=args.protocol)
    accs = ", ".join(f"{a:.4f}" for a in report.accuracies)
    print(f"{args.protocol} top-1: mean={report.mean:.4f} std={report.std:.4f} runs=[{accs}]")
    return 0


def _cmd_grid(args) -> int:
    config = _config_from_args(args)
    if args.sweep == "schemes":
        results = run_grid(config)
        for scheme, accs in results.items():
            print(f"{scheme}: {np.mean(accs):.4f}")
    elif args.sweep == "adv":
        run_adv_sweep(config)
    elif args.sweep == "beta":
        run_beta_sweep(config)
    return 0


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"version: {ckpt.version}")
    print(f"epoch: {ckpt.epoch}")
    print(f"extra: {ckpt.extra}")
    print(f"rng streams: {sorted(ckpt.rng_state)}")
    print("tensors:")
    total = 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        total += arr.size
        print(f"  {name}  shape={tuple(arr.shape)}")
    print(f"total parameters: {total}")
    if args.show_config:
        print("--- config echo ---")
        print(ckpt.config_text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hardviews",
                                     description="self-supervised pre-training with hard-example views")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the bundled synthetic shape dataset")
    p.add_argument("--out", required=True, help="output directory for train.hxds/test.hxds")
    p.add_argument("--train-count", type=int, default=5000)
    p.add_argument("--test-count", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    _add_config_flags(p)
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=["linear", "lowshot", "finetune"], default="linear")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("grid", help="scheme ablation grid or hyper-parameter sweeps")
    _add_config_flags(p)
    p.add_argument("--sweep", choices=["schemes", "adv", "beta"], default="schemes")
    p.set_defaults(fn=_cmd_grid)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint contents")
    p.add_argument("checkpoint")
    p.add_argument("--show-config", action="store_true")
    p.set_defaults(fn=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except HardviewsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
