"""Training-memory accounting derived purely from shapes and bit-widths.

Per (method, mode) row:

* ``scratch``: activation buffer from :func:`scratch_memory_bytes`.
* ``weights``: persistent parameter storage.
* ``extra``: what training adds on top. Backprop keeps one gradient per
  trainable parameter. Forward-only training keeps one snapshot of the
  trainable weights plus the gradient accumulator of the largest trainable
  tensor.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .netgraph import FLOAT, QUANTIZED, Network, scratch_memory_bytes

METHODS = ("bp", "ff")
MODES = (FLOAT, QUANTIZED)
FLOAT_BYTES = 2  # fp16-equivalent storage
ACC_BYTES = 4  # 32-bit integer accumulator


@dataclass(frozen=True)
class MemoryRow:
    method: str
    mode: str
    scratch: int
    weights: int
    extra: int

    @property
    def total(self) -> int:
        return self.scratch + self.weights + self.extra


def _weight_bytes(n: int, mode: str, weight_bits: int) -> int:
    return n * (FLOAT_BYTES if mode == FLOAT else weight_bits // 8)


def inference_bytes(net: Network, batch_size: int, mode: str, weight_bits: int = 16, act_bits: int = 8) -> int:
    return scratch_memory_bytes(net, batch_size, "ff", mode, act_bits) + _weight_bytes(net.num_params(), mode, weight_bits)


def memory_rows(net: Network, batch_size: int, weight_bits: int = 16, act_bits: int = 8) -> list[MemoryRow]:
    trainable = net.num_params(trainable_only=True)
    largest = max((net.params[n].size for n in net.trainable_names), default=0)
    rows = []
    for method in METHODS:
        for mode in MODES:
            scratch = scratch_memory_bytes(net, batch_size, method, mode, act_bits)
            weights = _weight_bytes(net.num_params(), mode, weight_bits)
            if method == "bp":
                extra = _weight_bytes(trainable, mode, weight_bits)
            else:
                acc = largest * (FLOAT_BYTES if mode == FLOAT else ACC_BYTES)
                extra = _weight_bytes(trainable, mode, weight_bits) + acc
            rows.append(MemoryRow(method, mode, scratch, weights, extra))
    return rows


@dataclass
class MemoryReport:
    batch_size: int
    rows: list

    def row(self, method: str, mode: str) -> MemoryRow:
        for r in self.rows:
            if r.method == method and r.mode == mode:
                return r
        raise KeyError((method, mode))

    def as_dicts(self) -> list[dict]:
        return [{**asdict(r), "total": r.total} for r in self.rows]

    def to_tsv(self) -> str:
        cols = ("method", "mode", "scratch", "weights", "extra", "total")
        lines = ["\t".join(cols)]
        lines += ["\t".join(str(d[c]) for c in cols) for d in self.as_dicts()]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = ("method", "mode", "scratch B", "weights B", "extra B", "total B")
        body = [(r.method, r.mode, f"{r.scratch:,}", f"{r.weights:,}", f"{r.extra:,}", f"{r.total:,}") for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        fmt = lambda row: "  ".join(str(v).rjust(w) if i > 1 else str(v).ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
        lines = [f"batch size {self.batch_size}", fmt(head), fmt(["-" * w for w in widths])]
        lines += [fmt(b) for b in body]
        return "\n".join(lines) + "\n"


def memory_report(net: Network, batch_size: int, weight_bits: int = 16, act_bits: int = 8) -> MemoryReport:
    return MemoryReport(batch_size, memory_rows(net, batch_size, weight_bits, act_bits))
