"""
Fixed-Point Tool

- N-bit symmetric bit-shift quantizer with step 2^(-f)
- Exact (sign, mantissa, exponent) codec for quantized weights
"""

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from sgmq.errors import QuantizationError

MAX_ABS_EXPONENT = 60
MIN_BITS = 2
MAX_BITS = 8  # mantissas are stored as int8


@dataclass(frozen=True)
class QuantizerSpec:
    """
    Bit width N and step exponent f of one layer; the step is 2^(-f).
    """
    bits: int
    exponent: int

    def __post_init__(self):
        if not MIN_BITS <= int(self.bits) <= MAX_BITS:
            raise QuantizationError(
                f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}"
            )

    @property
    def max_index(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def level_count(self) -> int:
        return 2 ** self.bits - 1


@dataclass(frozen=True)
class FixedPointCode:
    """
    One exact weight: (-1)^sign * mantissa * 2^(-exponent).
    """
    sign: int
    mantissa: int
    exponent: int

    def __post_init__(self):
        if self.sign not in (0, 1):
            raise QuantizationError(f"sign must be 0 or 1, got {self.sign}")
        if self.mantissa < 0:
            raise QuantizationError(f"mantissa must be non-negative, got {self.mantissa}")
        if self.mantissa == 0 and self.sign != 0:
            raise QuantizationError("zero must be encoded with sign=0")


def _check_exponent(exponent: int) -> None:
    if abs(int(exponent)) > MAX_ABS_EXPONENT:
        raise QuantizationError(
            f"exponent {exponent} outside supported range [-{MAX_ABS_EXPONENT}, {MAX_ABS_EXPONENT}]"
        )


def step_size(spec: QuantizerSpec) -> float:
    _check_exponent(spec.exponent)
    return math.ldexp(1.0, -int(spec.exponent))


def levels(spec: QuantizerSpec) -> np.ndarray:
    """Sorted level set {k * step : |k| <= 2^(N-1) - 1}."""
    _check_exponent(spec.exponent)
    k = np.arange(-spec.max_index, spec.max_index + 1, dtype=np.float64)
    return np.ldexp(k, -int(spec.exponent))


def _round_half_away(r: np.ndarray) -> np.ndarray:
    # r - trunc(r) is exact, unlike floor(|r| + 0.5)
    t = np.trunc(r)
    return t + np.where(np.abs(r - t) >= 0.5, np.sign(r), 0.0)


def _scaled_indices(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    _check_exponent(spec.exponent)
    with np.errstate(over="ignore", invalid="ignore"):
        r = np.ldexp(np.asarray(w, dtype=np.float64), int(spec.exponent))
        k = _round_half_away(r)
    k = np.where(np.isinf(r), np.sign(r) * spec.max_index, k)
    return np.clip(k, -spec.max_index, spec.max_index)


def _first_non_finite(w: np.ndarray) -> Tuple[Tuple[int, ...], float]:
    bad = np.argwhere(~np.isfinite(w))[0]
    index = tuple(int(i) for i in bad)
    return index, float(w[index])


def quantize_value(x: float, spec: QuantizerSpec) -> float:
    if not math.isfinite(x):
        raise QuantizationError(f"cannot quantize non-finite value {x}")
    k = _scaled_indices(np.float64(x), spec)
    return float(np.ldexp(k, -int(spec.exponent)))


def quantize_tensor(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """
    Elementwise quantize_value. The result keeps the input's shape and dtype.
    """
    w = np.asarray(w)
    if w.size and not np.all(np.isfinite(w)):
        index, value = _first_non_finite(w)
        raise QuantizationError(f"non-finite weight {value} at index {index}")
    k = _scaled_indices(w, spec)
    return np.ldexp(k, -int(spec.exponent)).astype(w.dtype if w.dtype.kind == "f" else np.float64)


def mode_indices(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Integer level index k of every weight, as int8."""
    w = np.asarray(w)
    if w.size and not np.all(np.isfinite(w)):
        index, value = _first_non_finite(w)
        raise QuantizationError(f"non-finite weight {value} at index {index}")
    return _scaled_indices(w, spec).astype(np.int8)


def encode(x_q: float, spec: QuantizerSpec) -> FixedPointCode:
    _check_exponent(spec.exponent)
    if not math.isfinite(x_q):
        raise QuantizationError(f"cannot encode non-finite value {x_q}")
    m = math.ldexp(x_q, int(spec.exponent))
    if m != math.floor(m):
        raise QuantizationError(
            f"value {x_q!r} is not on the grid of step 2^{-spec.exponent}"
        )
    if abs(m) > spec.max_index:
        raise QuantizationError(
            f"mantissa {int(m)} overflows {spec.bits}-bit range +/-{spec.max_index}"
        )
    mantissa = int(abs(m))
    sign = 1 if (m < 0 and mantissa != 0) else 0
    return FixedPointCode(sign=sign, mantissa=mantissa, exponent=int(spec.exponent))


def decode(code: FixedPointCode) -> float:
    _check_exponent(code.exponent)
    value = math.ldexp(float(code.mantissa), -int(code.exponent))
    return -value if code.sign else value


def encode_tensor(w_q: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """
    Signed int8 mantissas of an on-grid tensor. Raises on the first
    off-grid or overflowing entry.
    """
    _check_exponent(spec.exponent)
    w_q = np.asarray(w_q, dtype=np.float64)
    if w_q.size and not np.all(np.isfinite(w_q)):
        index, value = _first_non_finite(w_q)
        raise QuantizationError(f"non-finite weight {value} at index {index}")
    m = np.ldexp(w_q, int(spec.exponent))
    off_grid = m != np.trunc(m)
    if np.any(off_grid):
        index = tuple(int(i) for i in np.argwhere(off_grid)[0])
        raise QuantizationError(
            f"weight {float(w_q[index])!r} at index {index} is not on the grid of step 2^{-spec.exponent}"
        )
    overflow = np.abs(m) > spec.max_index
    if np.any(overflow):
        index = tuple(int(i) for i in np.argwhere(overflow)[0])
        raise QuantizationError(
            f"mantissa {int(m[index])} at index {index} overflows {spec.bits}-bit range +/-{spec.max_index}"
        )
    return m.astype(np.int8)


def decode_tensor(mantissas: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    _check_exponent(spec.exponent)
    return np.ldexp(np.asarray(mantissas).astype(np.float64), -int(spec.exponent))
