"""Command-line entry point: ``qzoff {train,eval,memreport,landscape,compare}``.

Exit codes: 0 success, 2 configuration error (including a rejected
quantized configuration), 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiment as exp
from .checkpoint import CheckpointError
from .config import EXPERIMENT_KEYS, TRAIN_KEYS, ConfigError, load_config
from .data import DataFormatError
from .landscape import GridSpec
from .trainer import NumericAbort


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {raw!r}")


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", choices=("bp", "ff_float", "ff_quant"))
    p.add_argument("--force-8w", action="store_true", help="run 8-bit weights even when eps_q rounds to zero")
    g = p.add_argument_group("training overrides")
    for key, typ in sorted(TRAIN_KEYS.items()):
        if key == "force":
            continue
        g.add_argument("--" + key.replace("_", "-"), dest="train_" + key, type=_bool if typ is bool else typ,
                       metavar=typ.__name__.upper())
    for key in ("init_checkpoint", "baseline", "calib_size", "zero_range"):
        typ = EXPERIMENT_KEYS[key]
        p.add_argument("--" + key.replace("_", "-"), dest="exp_" + key, type=typ)


def _overrides(args) -> dict:
    ov = {}
    for key in ("seed", "method"):
        if getattr(args, key, None) is not None:
            ov[("experiment", key)] = getattr(args, key)
    if getattr(args, "out", None):
        ov[("experiment", "out")] = os.path.abspath(args.out)
    for name, value in vars(args).items():
        if value is None:
            continue
        if name.startswith("train_"):
            ov[("train", name[6:])] = value
        elif name.startswith("exp_"):
            key = name[4:]
            ov[("experiment", key)] = os.path.abspath(value) if key in ("init_checkpoint", "baseline") else value
    if getattr(args, "force_8w", False):
        ov[("train", "weight_bits")] = 8
        ov[("train", "force")] = True
    return ov


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qzoff", description="Quantized forward-only training toolkit")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run one experiment and write its artifacts")
    _add_overrides(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured dataset")
    _add_overrides(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("memreport", help="print the training-memory accounting table")
    _add_overrides(p)
    p.add_argument("--tsv", action="store_true", help="machine-readable rows instead of the aligned table")

    p = sub.add_parser("landscape", help="export a loss-surface grid and trajectory")
    _add_overrides(p)
    p.add_argument("--checkpoint", help="centre checkpoint (default: RUN/final.qzof)")
    p.add_argument("--run", help="run directory whose checkpoints form the trajectory")
    p.add_argument("--trajectory", nargs="*", default=[], help="extra trajectory checkpoints")
    p.add_argument("--resolution", type=int)
    p.add_argument("--extent", type=float)
    p.add_argument("--grid-seed", type=int)

    p = sub.add_parser("compare", help="compare metrics of finished runs (gaps to the first)")
    p.add_argument("runs", nargs="+")
    p.add_argument("--json", action="store_true")
    return ap


def _dispatch(args) -> int:
    if args.verb == "compare":
        result = exp.compare_runs(args.runs)
        print(json.dumps(result, indent=2, sort_keys=True) if args.json else exp.compare_text(result), end="" if not args.json else "\n")
        return exp.EXIT_OK
    cfg = load_config(args.config, _overrides(args))
    if args.verb == "train":
        res = exp.run_experiment(cfg)
        m = res.metrics
        acc = m["final_accuracy"]
        print(f"{cfg.method}: zero-shot {m['zero_shot_accuracy']}, final {acc}, loss {m['final_loss']:.6g} -> {res.out}")
        if "gap_vs_baseline" in m:
            print(f"gap vs baseline ({m['baseline']['method']}): {m['gap_vs_baseline']:+.4f}")
        return exp.EXIT_OK
    if args.verb == "eval":
        print(json.dumps(exp.eval_checkpoint(cfg, args.checkpoint), sort_keys=True))
        return exp.EXIT_OK
    if args.verb == "memreport":
        report = exp.memreport_for(cfg)
        print(report.to_tsv() if args.tsv else report.to_text(), end="")
        return exp.EXIT_OK
    # landscape
    spec = dict(cfg.landscape)
    for key, val in (("resolution", args.resolution), ("extent", args.extent), ("seed", args.grid_seed)):
        if val is not None:
            spec[key] = val
    center = args.checkpoint or (os.path.join(args.run, "final.qzof") if args.run else None)
    if center is None:
        raise ConfigError("landscape needs --checkpoint or --run")
    traj = list(args.trajectory)
    if args.run:
        traj = exp.run_checkpoints(args.run) + [os.path.join(args.run, "final.qzof")] + traj
    out = args.out or cfg.out
    grid = exp.landscape_from_run(cfg, center, traj, out, GridSpec(**spec))
    print(f"grid {len(grid.xs)}x{len(grid.ys)}, centre loss {grid.center_loss:.6g}, "
          f"{len(grid.trajectory)} trajectory points -> {out}")
    return exp.EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except exp.RejectedConfig as e:
        print(str(e), file=sys.stderr)
        return exp.EXIT_CONFIG
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return exp.EXIT_CONFIG
    except (DataFormatError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return exp.EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return exp.EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return exp.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
