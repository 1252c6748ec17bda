"""Fixed-point numeric core.

Symmetric per-tensor quantization, dequantization and integer
multiply-shift re-quantization. All integer payloads are held in int64
numpy arrays; the declared bit-width only bounds their range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Real

import numpy as np

from . import kernels

INT32_MAX = 2**31 - 1
INT32_MIN = -(2**31)
MAX_SHIFT = 62
_M_LIMIT = 2**31  # multiplier must stay strictly below this (31 bits)

SUPPORTED_BITS = (8, 16, 32)


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    delta: float
    bits: int

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise QuantizationError(f"unsupported bit-width {self.bits}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise QuantizationError(f"scaling factor must be positive and finite, got {self.delta!r}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def from_max(cls, max_abs: float, bits: int) -> "QuantParams":
        """Scaling factor that maps ``max_abs`` onto the largest code."""
        qmax = 2 ** (bits - 1) - 1
        return cls(float(max_abs) / qmax, bits)


@dataclass(frozen=True)
class QTensor:
    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.int64:
            if not np.issubdtype(data.dtype, np.integer):
                raise QuantizationError("QTensor payload must be integer")
            data = data.astype(np.int64)
        if data.size and int(np.max(np.abs(data))) > self.params.qmax:
            raise QuantizationError(f"payload exceeds +/-{self.params.qmax}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def replace(self, data: np.ndarray) -> "QTensor":
        return QTensor(data, self.params)


@dataclass(frozen=True)
class RequantMultiplier:
    """Integer pair with ``m / 2**k`` approximating a real scale."""

    m: int
    k: int

    def __post_init__(self):
        if not (0 <= self.m < _M_LIMIT):
            raise QuantizationError(f"multiplier {self.m} does not fit 31 bits")
        if not (0 <= self.k <= MAX_SHIFT):
            raise QuantizationError(f"shift {self.k} outside [0, {MAX_SHIFT}]")

    @property
    def value(self) -> Fraction:
        return Fraction(self.m, 2**self.k)


def quantize(x, params: QuantParams) -> QTensor:
    x = np.asarray(x, dtype=np.float64)
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise QuantizationError(f"non-finite input at index {idx}")
    q = np.rint(x / params.delta)  # numpy rint rounds half to even
    q = np.clip(q, -params.qmax, params.qmax).astype(np.int64)
    return QTensor(q, params)


def dequantize(t: QTensor) -> np.ndarray:
    return t.data.astype(np.float64) * t.params.delta


def _as_fraction(factor) -> Fraction:
    if isinstance(factor, Fraction):
        return factor
    if isinstance(factor, Real) and math.isfinite(float(factor)):
        return Fraction(float(factor))
    raise QuantizationError(f"invalid factor {factor!r}")


def _ceil_div(num: int, den: int) -> int:
    return -((-num) // den)


def multiplier_for(factor) -> RequantMultiplier:
    """Multiplier for any positive factor below 2**31.

    ``k`` is the largest shift (capped at 62) for which the multiplier still
    fits in 31 bits. ``m`` is rounded up, so ``m / 2**k >= factor``; exact
    half-way products therefore always round away from zero.
    """
    f = _as_fraction(factor)
    if f <= 0:
        raise QuantizationError("factor must be positive")
    if f >= _M_LIMIT - 1:
        raise QuantizationError(f"factor {float(f)} too large for a 31-bit multiplier")
    # largest k with ceil(f * 2**k) < 2**31
    k_est = 30 - math.floor(math.log2(f.numerator) - math.log2(f.denominator))
    k = max(0, min(MAX_SHIFT, k_est + 1))
    while k > 0 and _ceil_div(f.numerator * 2**k, f.denominator) >= _M_LIMIT:
        k -= 1
    while k < MAX_SHIFT and _ceil_div(f.numerator * 2 ** (k + 1), f.denominator) < _M_LIMIT:
        k += 1
    m = _ceil_div(f.numerator * 2**k, f.denominator)
    return RequantMultiplier(m, k)


def derive_multiplier(factor) -> RequantMultiplier:
    f = _as_fraction(factor)
    if not (0 < f <= 1):
        raise QuantizationError(f"factor must lie in (0, 1], got {float(f)}")
    return multiplier_for(f)


def requantize(acc, mult: RequantMultiplier, out_params: QuantParams) -> QTensor:
    """Scale 32-bit accumulators by ``m / 2**k`` with saturation.

    Rounding is half away from zero, computed on the magnitude with a
    ``2**(k-1)`` pre-add before the shift. Products are formed in 64 bits.
    """
    acc = np.clip(np.asarray(acc, dtype=np.int64), INT32_MIN + 1, INT32_MAX)
    out = kernels.requantize(acc, mult.m, mult.k, out_params.qmax)
    return QTensor(out, out_params)


def round_half_away(x: Fraction) -> int:
    """Exact reference rounding used by tests and oracles."""
    n = abs(x.numerator) * 2 + x.denominator
    r = n // (2 * x.denominator)
    return r if x >= 0 else -r
