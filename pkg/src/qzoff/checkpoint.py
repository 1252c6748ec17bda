"""Binary checkpoint files.

Layout (all little-endian)::

    b"QZOF" | version u16 | layer_count u32 | tensor_count u32
    tensor_count x { name_len u16 | name utf-8 | bits u8 | delta f64
                     | rank u8 | dims u32[rank] | payload }
    mask_count u32
    mask_count x { name_len u16 | name | n_elems u32 | packed bits }

``bits`` is 8/16/32 for integer payloads (int8/int16/int32) and 0 for a
float64 payload, whose ``delta`` is written as 1.0. Activation scales are
stored as empty integer tensors named ``act:<index>``. Mask bits are packed
little-endian bit order, one bit per element.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .fxp import QTensor, QuantParams

MAGIC = b"QZOF"
VERSION = 1
_INT_DTYPES = {8: "<i1", 16: "<i2", 32: "<i4"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    layer_count: int
    tensors: dict = field(default_factory=dict)  # name -> QTensor | float ndarray
    act_params: list = field(default_factory=list)
    masks: dict = field(default_factory=dict)


def _write_name(buf, name):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n, what):
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what} at offset {buf.tell()}")
    return raw


def _read_name(buf):
    (n,) = struct.unpack("<H", _read_exact(buf, 2, "name length"))
    return _read_exact(buf, n, "name").decode("utf-8")


def _write_tensor(buf, name, bits, delta, arr):
    _write_name(buf, name)
    buf.write(struct.pack("<Bd", bits, delta))
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    dtype = "<f8" if bits == 0 else _INT_DTYPES[bits]
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    records = []
    for name, t in ckpt.tensors.items():
        if isinstance(t, QTensor):
            records.append((name, t.params.bits, t.params.delta, t.data))
        else:
            records.append((name, 0, 1.0, np.asarray(t, dtype=np.float64)))
    for i, p in enumerate(ckpt.act_params):
        records.append((f"act:{i}", p.bits, p.delta, np.zeros(0, dtype=np.int64)))
    buf.write(MAGIC)
    buf.write(struct.pack("<HII", VERSION, ckpt.layer_count, len(records)))
    for rec in records:
        _write_tensor(buf, *rec)
    buf.write(struct.pack("<I", len(ckpt.masks)))
    for name, mask in ckpt.masks.items():
        flat = np.asarray(mask, dtype=bool).reshape(-1)
        _write_name(buf, name)
        buf.write(struct.pack("<I", flat.size))
        buf.write(np.packbits(flat, bitorder="little").tobytes())
    return buf.getvalue()


def decode(raw: bytes, shapes: dict | None = None) -> Checkpoint:
    buf = io.BytesIO(raw)
    if _read_exact(buf, 4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a QZOF checkpoint")
    version, layer_count, count = struct.unpack("<HII", _read_exact(buf, 10, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint(layer_count)
    acts = {}
    for _ in range(count):
        name = _read_name(buf)
        bits, delta = struct.unpack("<Bd", _read_exact(buf, 9, "tensor header"))
        (rank,) = struct.unpack("<B", _read_exact(buf, 1, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, "dims"))
        if bits == 0:
            dtype = np.dtype("<f8")
        elif bits in _INT_DTYPES:
            dtype = np.dtype(_INT_DTYPES[bits])
        else:
            raise CheckpointError(f"tensor {name}: bad bit-width {bits} at offset {buf.tell()}")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(_read_exact(buf, n * dtype.itemsize, name), dtype=dtype).reshape(dims)
        if name.startswith("act:"):
            acts[int(name[4:])] = QuantParams(delta, bits)
        elif bits == 0:
            ckpt.tensors[name] = arr.astype(np.float64)
        else:
            ckpt.tensors[name] = QTensor(arr.astype(np.int64), QuantParams(delta, bits))
    ckpt.act_params = [acts[i] for i in sorted(acts)]
    (nmask,) = struct.unpack("<I", _read_exact(buf, 4, "mask count"))
    for _ in range(nmask):
        name = _read_name(buf)
        (n,) = struct.unpack("<I", _read_exact(buf, 4, "mask size"))
        packed = np.frombuffer(_read_exact(buf, (n + 7) // 8, f"mask {name}"), dtype=np.uint8)
        flat = np.unpackbits(packed, count=n, bitorder="little").astype(bool)
        ref = ckpt.tensors.get(name)
        ckpt.masks[name] = flat.reshape(ref.shape if ref is not None else (n,))
    if buf.read(1):
        raise CheckpointError(f"trailing bytes after offset {buf.tell() - 1}")
    return ckpt


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def from_network(net, masks=None) -> Checkpoint:
    if net.is_quantized:
        tensors = {n: net.qparams[n] for n in net.param_names}
        acts = list(net.act_params)
    else:
        tensors = {n: net.params[n] for n in net.param_names}
        acts = []
    return Checkpoint(len(net.layers), tensors, acts, dict(masks or {}))


def save(path, net, masks=None):
    atomic_write(path, encode(from_network(net, masks)))


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())


def apply(net, ckpt: Checkpoint):
    """Load checkpoint tensors into ``net`` (float or quantized)."""
    missing = [n for n in net.param_names if n not in ckpt.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing)}")
    quantized = [isinstance(ckpt.tensors[n], QTensor) for n in net.param_names]
    if any(quantized) and not all(quantized):
        raise CheckpointError("checkpoint mixes float and integer parameter tensors")
    for name, shape in net._param_layout():
        got = ckpt.tensors[name].shape
        if tuple(got) != tuple(shape):
            raise CheckpointError(f"tensor {name}: shape {tuple(got)} incompatible with {tuple(shape)}")
    if all(quantized):
        if len(ckpt.act_params) != len(net.shapes):
            raise CheckpointError("quantized checkpoint lacks activation scales")
        net.qparams = {n: ckpt.tensors[n] for n in net.param_names}
        net.act_params = list(ckpt.act_params)
        net.sync_float_from_quantized()
    else:
        net.load_float({n: ckpt.tensors[n] for n in net.param_names})
        net.qparams = None
        net.act_params = None
    return net
