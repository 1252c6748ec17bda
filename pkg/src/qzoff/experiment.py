"""Experiment orchestration: train, evaluate, report memory, export landscapes.

All artifacts of a training run are written to a staging directory next to
the output directory and moved into place only when the run succeeds, so a
failed run leaves nothing behind.
"""
from __future__ import annotations

import glob
import json
import os
import re
import shutil
import tempfile
from dataclasses import dataclass

from . import checkpoint as ckpt_io
from .config import ExperimentConfig, format_model_spec, load_model
from .data import DataFormatError, Dataset, ingest_dataset
from .enhancements import build_mask
from .landscape import GridSpec, export_landscape
from .memory import memory_report
from .netgraph import FLOAT, QUANTIZED, Batch, Network, accuracy, forward_loss
from .oracle_bp import train_bp
from .trainer import ConfigRejection, train, validate_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class RejectedConfig(ValueError):
    """Quantized constants rejected (for example eps_q = 0 with 8-bit weights)."""


@dataclass
class RunResult:
    out: str
    metrics: dict
    net: Network
    dataset: Dataset


def _mode(method: str) -> str:
    return QUANTIZED if method == "ff_quant" else FLOAT


def evaluate(net: Network, dataset: Dataset, mode: str):
    """(accuracy or None, mean loss) on the held-out split (train split if none)."""
    x, y = (dataset.test_x, dataset.test_y) if dataset.test_x is not None else (dataset.train_x, dataset.train_y)
    loss = forward_loss(net, Batch(x, y), mode)
    net.forward_calls -= 1
    acc = accuracy(net, x, y, mode) if net.head.kind == "softmax_xent_head" else None
    return acc, loss


def prepare(cfg: ExperimentConfig):
    """Model (initialised and, for ff_quant, quantized), dataset and masks.

    Raises ``ConfigError``, data errors, ``CheckpointError`` or
    :class:`RejectedConfig` before anything is written.
    """
    net = load_model(cfg.model, seed=cfg.seed)
    dataset = ingest_dataset(cfg.data)
    if cfg.init_checkpoint:
        ckpt_io.apply(net, ckpt_io.load(cfg.init_checkpoint))
        net.qparams = None  # fine-tuning starts from the real-valued weights
        net.act_params = None
    if cfg.method == "ff_quant":
        t = cfg.train
        net.quantize(dataset.train_x[: cfg.calib_size], t.weight_bits, t.act_bits, t.wmax_scale, cfg.zero_range)
        consts = validate_config(net, t)
        if isinstance(consts, ConfigRejection):
            raise RejectedConfig(consts.report())
    masks = None
    if cfg.method != "bp" and cfg.train.sparse_density < 1:
        masks = build_mask(net, cfg.train.sparse_density, cfg.train.sparse_strategy, cfg.train.sparse_threshold,
                           seed=cfg.seed)
    return net, dataset, masks


def _read_baseline(path):
    """Metrics of an earlier run, given its directory or its metrics.json."""
    f = os.path.join(path, "metrics.json") if os.path.isdir(path) else path
    with open(f) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{f}: baseline metrics are not valid JSON ({e})") from None


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Train per ``cfg.method`` and write all artifacts to ``cfg.out``.

    Artifacts: ``log.tsv``, ``eval.tsv``, ``final.qzof``, periodic
    ``ckpt_<step>.qzof``, ``metrics.json``, ``memory.txt``/``memory.tsv``
    and ``model.spec``.
    """
    baseline = _read_baseline(cfg.baseline) if cfg.baseline else None
    net, dataset, masks = prepare(cfg)
    mode = _mode(cfg.method)
    zero_acc, zero_loss = evaluate(net, dataset, mode)
    parent = os.path.dirname(os.path.abspath(cfg.out))
    made_parent = not os.path.isdir(parent)
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".stage-", dir=parent)
    try:
        def on_checkpoint(step, model):
            ckpt_io.save(os.path.join(stage, f"ckpt_{step:06d}.qzof"), model, masks)

        if cfg.method == "bp":
            net, log = train_bp(net, dataset, cfg.train, on_checkpoint=on_checkpoint)
        else:
            net, log = train(net, dataset, cfg.train, masks=masks, quantized=cfg.method == "ff_quant",
                             on_checkpoint=on_checkpoint)
        final_acc, final_loss = evaluate(net, dataset, mode)
        metrics = {
            "method": cfg.method,
            "seed": cfg.seed,
            "steps": cfg.train.steps,
            "num_params": net.num_params(),
            "trainable_params": net.num_params(trainable_only=True),
            "zero_shot_accuracy": zero_acc,
            "zero_shot_loss": zero_loss,
            "final_accuracy": final_acc,
            "final_loss": final_loss,
        }
        if masks is not None:
            kept = sum(int(m.sum()) for m in masks.values())
            metrics["sparse_kept"] = kept
        if baseline is not None:
            metrics["baseline"] = {
                "method": baseline.get("method"),
                "final_accuracy": baseline.get("final_accuracy"),
                "final_loss": baseline.get("final_loss"),
            }
            if final_acc is not None and baseline.get("final_accuracy") is not None:
                metrics["gap_vs_baseline"] = final_acc - baseline["final_accuracy"]
        report = memory_report(net, cfg.train.batch_size, cfg.train.weight_bits, cfg.train.act_bits)
        files = {
            "log.tsv": log.to_tsv(cfg.wall_clock).encode(),
            "eval.tsv": log.evals_tsv().encode(),
            "metrics.json": _json(metrics),
            "memory.txt": report.to_text().encode(),
            "memory.tsv": report.to_tsv().encode(),
            "model.spec": format_model_spec(net).encode(),
        }
        for name, data in files.items():
            ckpt_io.atomic_write(os.path.join(stage, name), data)
        ckpt_io.save(os.path.join(stage, "final.qzof"), net, masks)
        if os.path.isdir(cfg.out):
            shutil.rmtree(cfg.out)
        os.replace(stage, cfg.out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if made_parent and not os.listdir(parent):
            os.rmdir(parent)
        raise
    return RunResult(cfg.out, metrics, net, dataset)


def eval_checkpoint(cfg: ExperimentConfig, path) -> dict:
    net = load_model(cfg.model, seed=cfg.seed)
    dataset = ingest_dataset(cfg.data)
    ckpt_io.apply(net, ckpt_io.load(path))
    mode = QUANTIZED if net.is_quantized else FLOAT
    acc, loss = evaluate(net, dataset, mode)
    return {"checkpoint": os.path.basename(os.fspath(path)), "mode": mode, "accuracy": acc, "loss": loss}


def _step_of(path) -> int:
    m = re.search(r"(\d+)\.qzof$", os.path.basename(path))
    return int(m.group(1)) if m else -1


def landscape_from_run(cfg: ExperimentConfig, center_path, trajectory_paths=(), out_dir=None, grid: GridSpec | None = None):
    """Grid around ``center_path`` plus projected ``trajectory_paths``.

    Trajectory epochs are the step numbers in the checkpoint file names; a
    ``final.qzof`` is placed after all numbered ones.
    """
    net = load_model(cfg.model, seed=cfg.seed)
    dataset = ingest_dataset(cfg.data)
    grid = grid or GridSpec(**cfg.landscape)
    center = ckpt_io.load(center_path)
    traj = []
    for p in sorted(trajectory_paths, key=lambda p: (_step_of(p) < 0, _step_of(p))):
        step = _step_of(p)
        traj.append((step if step >= 0 else cfg.train.steps, ckpt_io.load(p)))
    result = export_landscape(net, center, dataset, grid, traj)
    if out_dir:
        result.write(out_dir)
    return result


def run_checkpoints(run_dir) -> list[str]:
    return sorted(glob.glob(os.path.join(run_dir, "ckpt_*.qzof")))


def compare_runs(run_dirs) -> dict:
    """Final accuracies of several runs and their gaps to the first one."""
    runs = []
    for d in run_dirs:
        m = _read_baseline(d)
        runs.append({"run": os.path.basename(os.path.normpath(d)), "method": m.get("method"),
                     "zero_shot_accuracy": m.get("zero_shot_accuracy"), "final_accuracy": m.get("final_accuracy"),
                     "final_loss": m.get("final_loss")})
    ref = runs[0]["final_accuracy"] if runs else None
    for r in runs:
        acc = r["final_accuracy"]
        r["gap_vs_first"] = None if acc is None or ref is None else acc - ref
    return {"runs": runs}


def compare_text(result: dict) -> str:
    fmt = lambda v: "-" if v is None else f"{v:.4f}"
    lines = ["run\tmethod\tzero_shot\tfinal\tgap_vs_first"]
    for r in result["runs"]:
        lines.append(f"{r['run']}\t{r['method']}\t{fmt(r['zero_shot_accuracy'])}\t{fmt(r['final_accuracy'])}\t{fmt(r['gap_vs_first'])}")
    return "\n".join(lines) + "\n"


def memreport_for(cfg: ExperimentConfig, batch_size: int | None = None):
    net = load_model(cfg.model, seed=cfg.seed)
    t = cfg.train
    return memory_report(net, batch_size or t.batch_size, t.weight_bits, t.act_bits)
