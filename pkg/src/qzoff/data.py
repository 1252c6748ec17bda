"""Dataset ingestion: IDX files, labelled CSV and synthetic generators."""
from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray | None
    test_y: np.ndarray | None
    num_classes: int
    input_shape: tuple
    task: str = "classification"

    def __len__(self):
        return len(self.train_x) + (0 if self.test_x is None else len(self.test_x))


# -- IDX ---------------------------------------------------------------------------


def read_idx(path, expect_magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for IDX header (offset 0)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DataFormatError(f"{path}: truncated IDX dimensions (offset {len(raw)})")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    n = int(np.prod(dims))
    if len(raw) - hdr != n:
        raise DataFormatError(f"{path}: payload has {len(raw) - hdr} bytes at offset {hdr}, header declares {n}")
    return np.frombuffer(raw, dtype=np.uint8, offset=hdr).reshape(dims)


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_idx(images_path, labels_path):
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise DataFormatError(f"{images_path}: {len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64), images.shape[1:]


# -- CSV ---------------------------------------------------------------------------


def load_csv(path, label_column="label"):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f"{path}: empty CSV")
    header = rows[0]
    if isinstance(label_column, str) and label_column in header:
        li = header.index(label_column)
    else:
        try:
            li = int(label_column)
        except (TypeError, ValueError):
            raise DataFormatError(f"{path}: label column {label_column!r} not in header") from None
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: {len(row)} fields, header has {len(header)}")
        try:
            vals = [float(v) for v in row]
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: {e}") from None
        labels.append(vals.pop(li))
        feats.append(vals)
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(feats), np.array(labels)


# -- synthetic -----------------------------------------------------------------------


def make_blobs(n=1000, classes=2, dim=2, sep=4.0, sigma=1.0, seed=0):
    """Isotropic Gaussian classes with means ``sep * sigma * e_c``.

    Any two means are ``sqrt(2) * sep * sigma`` apart. Needs ``dim >= classes``.
    """
    if dim < classes:
        raise ValueError("blobs need dim >= classes")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n)
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes)] = sep * sigma
    x = means[y] + sigma * rng.standard_normal((n, dim))
    return x, y


def make_moons(n=1000, noise=0.1, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(0, np.pi, size=n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], 1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    return x + noise * rng.standard_normal((n, 2)), y


def make_quadratic(n=1000, a=2.0, b=-1.0, c=0.5, noise=0.05, seed=0):
    """1-D quadratic regression; features are ``(x, x**2)`` so a linear model fits."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=n)
    y = a * x**2 + b * x + c + noise * rng.standard_normal(n)
    return np.stack([x, x**2], 1), y


# -- entry point -----------------------------------------------------------------------


def split(x, y, test_fraction, seed):
    perm = np.random.default_rng([seed, 0x5B117]).permutation(len(x))
    n_test = int(round(test_fraction * len(x)))
    te, tr = perm[:n_test], perm[n_test:]
    if n_test == 0:
        return x[tr], y[tr], None, None
    return x[tr], y[tr], x[te], y[te]


def _need(spec, key):
    if key not in spec:
        raise DataFormatError(f"dataset spec lacks {key!r}")
    return spec[key]


def ingest_dataset(spec: Mapping) -> Dataset:
    """Build a :class:`Dataset` from a flat spec.

    ``kind`` is ``idx`` (``images``, ``labels``), ``csv`` (``path``,
    ``label_column``), or one of the generators ``blobs``, ``moons``,
    ``quadratic``. Shared keys: ``seed``, ``test_fraction``, ``limit``.
    """
    kind = _need(spec, "kind")
    seed = int(spec.get("seed", 0))
    test_fraction = float(spec.get("test_fraction", 0.2))
    task = "classification"
    shape = None
    if kind == "idx":
        for key in ("images", "labels"):
            if not os.path.exists(_need(spec, key)):
                raise FileNotFoundError(spec[key])
        x, y, img_shape = load_idx(spec["images"], spec["labels"])
        if spec.get("keep_image_shape", False):
            shape = (1,) + tuple(img_shape)
    elif kind == "csv":
        if not os.path.exists(_need(spec, "path")):
            raise FileNotFoundError(spec["path"])
        x, y = load_csv(spec["path"], spec.get("label_column", "label"))
        if spec.get("task", "classification") == "regression":
            task = "regression"
        else:
            y = y.astype(np.int64)
        if spec.get("standardize", True):
            mu, sd = x.mean(0), x.std(0)
            x = (x - mu) / np.where(sd > 0, sd, 1.0)
    elif kind == "blobs":
        x, y = make_blobs(int(spec.get("n", 1000)), int(spec.get("classes", 2)), int(spec.get("dim", 2)),
                          float(spec.get("sep", 4.0)), float(spec.get("sigma", 1.0)), seed)
    elif kind == "moons":
        x, y = make_moons(int(spec.get("n", 1000)), float(spec.get("noise", 0.1)), seed)
    elif kind == "quadratic":
        x, y = make_quadratic(int(spec.get("n", 1000)), noise=float(spec.get("noise", 0.05)), seed=seed)
        task = "regression"
    else:
        raise DataFormatError(f"unknown dataset kind {kind!r}")
    limit = spec.get("limit")
    if limit:
        x, y = x[: int(limit)], y[: int(limit)]
    tr_x, tr_y, te_x, te_y = split(x, y, test_fraction, seed)
    classes = int(y.max()) + 1 if task == "classification" else 0
    if shape is None:
        shape = tuple(x.shape[1:])
    reshape = lambda a: None if a is None else a.reshape((-1,) + shape)
    return Dataset(reshape(tr_x), tr_y, reshape(te_x), te_y, classes, shape, task)
