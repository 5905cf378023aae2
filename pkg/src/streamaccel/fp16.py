"""IEEE-754 binary16 arithmetic on raw 16-bit patterns.

Scalars are plain ``int`` bit patterns (0..0xFFFF). Every operation computes
the exact real result in binary64 and rounds once to binary16 with
round-to-nearest-even. Products and sums of two halves are exact in binary64;
quotients are rounded twice, which is harmless because 53 >= 2*11 + 2.

The ``v*`` helpers are the array counterparts used by the engine model. They
work on ``numpy.float16`` arrays and lean on numpy's correctly rounded
float64 -> float16 cast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NAN = 0x7E00
POS_INF = 0x7C00
NEG_INF = 0xFC00
POS_ZERO = 0x0000
NEG_ZERO = 0x8000
MAX_NORMAL = 65504.0
MIN_NORMAL = 2.0**-14
MIN_SUBNORMAL = 2.0**-24


class FP16Error(ValueError):
    pass


def is_nan(h: int) -> bool:
    return (h & 0x7C00) == 0x7C00 and (h & 0x03FF) != 0


def is_inf(h: int) -> bool:
    return (h & 0x7FFF) == 0x7C00


def real_to_half(x: float, flush_to_zero: bool = False) -> int:
    """Round a real to the nearest binary16 pattern (ties to even)."""
    if math.isnan(x):
        return NAN
    sign = 0x8000 if math.copysign(1.0, x) < 0 else 0
    a = abs(x)
    if math.isinf(a):
        return sign | POS_INF
    if a == 0.0:
        return sign
    if a < MIN_NORMAL:
        if flush_to_zero:
            return sign
        # scaling by a power of two is exact; round() ties to even
        q = round(a * 2.0**24)
        return sign | q  # q == 0x400 is the smallest normal, encoded correctly
    mant, exp = math.frexp(a)  # a = mant * 2**exp, mant in [0.5, 1)
    e = exp - 1
    q = round(mant * 2048.0)  # 11 significant bits
    if q == 2048:
        q = 1024
        e += 1
    biased = e + 15
    if biased >= 31:
        return sign | POS_INF
    return sign | (biased << 10) | (q - 1024)


def half_to_real(h: int) -> float:
    """Exact value of a binary16 pattern; NaN patterns give ``math.nan``."""
    if not 0 <= h <= 0xFFFF:
        raise FP16Error(f"not a 16-bit pattern: {h!r}")
    sign = -1.0 if h & 0x8000 else 1.0
    e = (h >> 10) & 0x1F
    m = h & 0x3FF
    if e == 0x1F:
        return math.nan if m else sign * math.inf
    if e == 0:
        return sign * m * MIN_SUBNORMAL
    return sign * (1024 + m) * 2.0 ** (e - 25)


def _check(h: int) -> float:
    if is_nan(h):
        raise FP16Error("NaN operand")
    return half_to_real(h)


def half_mul(a: int, b: int, flush_to_zero: bool = False) -> int:
    x, y = half_to_real(a), half_to_real(b)
    return real_to_half(x * y, flush_to_zero)


def half_add(a: int, b: int, flush_to_zero: bool = False) -> int:
    x, y = half_to_real(a), half_to_real(b)
    return real_to_half(x + y, flush_to_zero)


def half_div(a: int, b: int, flush_to_zero: bool = False) -> int:
    x, y = half_to_real(a), half_to_real(b)
    if math.isnan(x) or math.isnan(y):
        return NAN
    if y == 0.0:
        if x == 0.0:
            return NAN
        neg = (math.copysign(1.0, x) < 0) != (math.copysign(1.0, y) < 0)
        return NEG_INF if neg else POS_INF
    if math.isinf(x) and math.isinf(y):
        return NAN
    return real_to_half(x / y, flush_to_zero)


def half_gt(a: int, b: int) -> bool:
    """``a > b`` on the real line. NaN operands raise; -0 equals +0."""
    return _check(a) > _check(b)


def half_relu(h: int) -> int:
    # sign-bit test only, so -0 also becomes +0
    return POS_ZERO if h & 0x8000 else h


@dataclass(frozen=True)
class LatencyTable:
    mul: int = 6
    add: int = 2
    cmp: int = 2
    div: int = 6
    fifo_write: int = 6


def latency_of(kind: str, table: LatencyTable | None = None) -> int:
    table = table or LatencyTable()
    if kind not in ("mul", "add", "cmp", "div", "fifo_write"):
        raise ValueError(f"unknown operation kind {kind!r}")
    return getattr(table, kind)


# --- array helpers -----------------------------------------------------------


def to_bits(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float16).view(np.uint16)


def from_bits(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint16).view(np.float16)


def vround(x: np.ndarray, flush_to_zero: bool = False) -> np.ndarray:
    """Round a float64 array to float16 (nearest-even)."""
    with np.errstate(over="ignore"):
        out = np.asarray(x, dtype=np.float64).astype(np.float16)
    if flush_to_zero:
        bits = out.view(np.uint16)
        sub = (bits & 0x7C00) == 0
        out = np.where(sub, from_bits(bits & 0x8000), out).astype(np.float16)
    return out


def vmul(a, b, flush_to_zero: bool = False) -> np.ndarray:
    return vround(np.asarray(a, np.float64) * np.asarray(b, np.float64), flush_to_zero)


def vadd(a, b, flush_to_zero: bool = False) -> np.ndarray:
    return vround(np.asarray(a, np.float64) + np.asarray(b, np.float64), flush_to_zero)


def vdiv(a, b, flush_to_zero: bool = False) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.asarray(a, np.float64) / np.asarray(b, np.float64)
    return vround(q, flush_to_zero)


def vrelu(a: np.ndarray) -> np.ndarray:
    bits = to_bits(a)
    return from_bits(np.where(bits & 0x8000, np.uint16(0), bits).astype(np.uint16))


def vgt(a, b) -> np.ndarray:
    a64 = np.asarray(a, np.float64)
    b64 = np.asarray(b, np.float64)
    if np.isnan(a64).any() or np.isnan(b64).any():
        raise FP16Error("NaN operand")
    return a64 > b64
