"""Experiment configuration files and model spec files.

Experiment files are INI-style with sections ``[experiment]``, ``[data]``,
``[train]`` and ``[landscape]``. Every key is checked against a known set;
an unknown key is an error reported with its line number. Relative paths
resolve against the config file's directory.

Model spec files hold one layer per line::

    input 16            # input shape (C H W for images)
    dense 16 256 frozen
    relu
    dense 256 4
    softmax_xent_head
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field

from .netgraph import BODY_KINDS, HEAD_KINDS, LayerSpec, Network, ShapeError
from .trainer import TrainConfig

METHODS = ("bp", "ff_float", "ff_quant")


class ConfigError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path = path
        self.line = line


EXPERIMENT_KEYS = {
    "model": str, "method": str, "seed": int, "out": str, "init_checkpoint": str, "baseline": str,
    "calib_size": int, "zero_range": float, "wall_clock": bool,
}
DATA_KEYS = {
    "kind": str, "images": str, "labels": str, "path": str, "label_column": str, "task": str,
    "standardize": bool, "n": int, "classes": int, "dim": int, "sep": float, "sigma": float,
    "noise": float, "test_fraction": float, "limit": int, "keep_image_shape": bool, "seed": int,
}
DATA_PATH_KEYS = ("images", "labels", "path")
LANDSCAPE_KEYS = {"resolution": int, "extent": float, "seed": int, "eval_size": int}


def _train_keys() -> dict:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        out[f.name] = float if default is None else type(default)
    out.pop("seed")  # taken from [experiment]
    return out


TRAIN_KEYS = _train_keys()
SECTIONS = {"experiment": EXPERIMENT_KEYS, "data": DATA_KEYS, "train": TRAIN_KEYS, "landscape": LANDSCAPE_KEYS}


@dataclass
class ExperimentConfig:
    model: str
    method: str = "ff_quant"
    seed: int = 0
    out: str = "runs/out"
    init_checkpoint: str | None = None
    baseline: str | None = None
    calib_size: int = 256
    zero_range: float = 1.0
    wall_clock: bool = False
    data: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    landscape: dict = field(default_factory=dict)
    source: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {self.method!r}", self.source)


def _convert(raw: str, typ, key, path, line):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw, 0)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}", path, line) from None


def _line_index(text: str) -> dict:
    """(section, key) -> line number, for diagnostics."""
    index, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = no
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip().lower()), no)
    return index


def parse_config(text: str, path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as e:
        line = getattr(e, "lineno", None)
        raise ConfigError(str(e).splitlines()[0], path, line) from None
    lines = _line_index(text)
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    values = {s: {} for s in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", path, lines.get((section, None)))
        known = SECTIONS[section]
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
            values[section][key] = _convert(raw, known[key], key, path, line)
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            values[section][key] = value
    exp = values["experiment"]
    if "model" not in exp:
        raise ConfigError("[experiment] needs a model spec path", path)
    resolve = lambda p: p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))
    for key in ("model", "init_checkpoint", "baseline", "out"):
        if key in exp:
            exp[key] = resolve(exp[key])
    data = values["data"]
    for key in DATA_PATH_KEYS:
        if key in data:
            data[key] = resolve(data[key])
    if "kind" not in data:
        raise ConfigError("[data] needs a kind", path, lines.get(("data", None)))
    seed = exp.get("seed", 0)
    data.setdefault("seed", seed)
    try:
        train = TrainConfig(seed=seed, **values["train"])
    except ValueError as e:
        raise ConfigError(f"[train] {e}", path, lines.get(("train", None))) from None
    return ExperimentConfig(data=data, train=train, landscape=values["landscape"], source=path, **exp)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError("config file not found", os.fspath(path))
    with open(path) as f:
        return parse_config(f.read(), os.fspath(path), overrides)


# -- model spec files ------------------------------------------------------


def parse_model_spec(text: str, path: str | None = None) -> tuple[list, tuple]:
    layers, input_shape = [], None
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        trainable = True
        if args and args[-1] == "frozen":
            trainable = False
            args = args[:-1]
        if kind == "input":
            try:
                input_shape = tuple(int(a) for a in args)
            except ValueError:
                raise ConfigError(f"bad input shape {' '.join(args)!r}", path, no) from None
            continue
        if kind not in BODY_KINDS + HEAD_KINDS:
            raise ConfigError(f"unknown layer kind {kind!r}", path, no)
        try:
            layers.append(LayerSpec(kind, tuple(int(a) for a in args), trainable))
        except ValueError as e:
            raise ConfigError(str(e), path, no) from None
    if input_shape is None:
        raise ConfigError("model spec lacks an 'input' line", path)
    return layers, input_shape


def load_model(path, seed: int = 0) -> Network:
    if not os.path.isfile(path):
        raise ConfigError("model spec not found", os.fspath(path))
    with open(path) as f:
        layers, input_shape = parse_model_spec(f.read(), os.fspath(path))
    try:
        return Network(layers, input_shape, seed=seed)
    except ShapeError as e:
        raise ConfigError(str(e), os.fspath(path)) from None


def format_model_spec(net: Network) -> str:
    lines = ["input " + " ".join(str(s) for s in net.input_shape)]
    for layer in net.layers:
        parts = [layer.kind, *map(str, layer.dims)]
        if not layer.trainable and layer.kind in ("dense", "conv2d"):
            parts.append("frozen")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
