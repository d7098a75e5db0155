"""Bit-exact BF16 / INT8 weight codecs and single-bit flip semantics.

Patterns are raw unsigned integers: 16 bits for BF16 (1 sign, 8 exponent,
7 mantissa) and 8 bits for INT8 (two's complement code, dequantized as
``scale * code``).  Decoded values are float64.  Every BF16 value is held
exactly, and INT8 scales are trimmed to a short significand so every
dequantized value and INT8 flip delta is exact as well.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class Kind(enum.Enum):
    BF16 = "bf16"
    INT8 = "int8"


class Direction(enum.Enum):
    ZERO_TO_ONE = "0->1"
    ONE_TO_ZERO = "1->0"


SCALE_BITS = 32


def short_scale(scale: float) -> float:
    """Round ``scale`` to a ``SCALE_BITS``-bit significand.

    With at most 44 significant bits, ``code * scale`` and every code
    difference times the scale are exact in float64.
    """
    m, e = math.frexp(float(scale))
    return math.ldexp(round(m * 2**SCALE_BITS) / 2**SCALE_BITS, e)


@dataclass(frozen=True)
class QuantFormat:
    kind: Kind
    scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and > 0, got {self.scale!r}")
        object.__setattr__(self, "scale", short_scale(self.scale))

    @property
    def width(self) -> int:
        return 16 if self.kind is Kind.BF16 else 8

    @property
    def dtype(self):
        return np.uint16 if self.kind is Kind.BF16 else np.uint8

    @classmethod
    def bf16(cls) -> "QuantFormat":
        return cls(Kind.BF16)

    @classmethod
    def int8(cls, scale: float) -> "QuantFormat":
        return cls(Kind.INT8, float(scale))


BF16 = QuantFormat.bf16()


@dataclass(frozen=True)
class BitFlip:
    bit_position: int
    direction: Direction
    delta_w: float
    finite: bool = True


def _check_width(pattern: int, fmt: QuantFormat) -> int:
    pattern = int(pattern)
    if not 0 <= pattern < (1 << fmt.width):
        raise ValueError(f"pattern {pattern:#x} does not fit {fmt.width} bits")
    return pattern


def decode_array(patterns, fmt: QuantFormat) -> np.ndarray:
    """Vectorized decode of raw patterns to float64."""
    p = np.asarray(patterns)
    if fmt.kind is Kind.BF16:
        bits = p.astype(np.uint32) << np.uint32(16)
        with np.errstate(invalid="ignore"):  # NaN payloads survive the widening
            return bits.view(np.float32).astype(np.float64)
    codes = p.astype(np.uint8).view(np.int8).astype(np.float64)
    return codes * fmt.scale


def decode(pattern: int, fmt: QuantFormat) -> float:
    pattern = _check_width(pattern, fmt)
    return float(decode_array(np.array([pattern], dtype=fmt.dtype), fmt)[0])


def encode_array(values, fmt: QuantFormat) -> np.ndarray:
    """Round float values into the format (round-to-nearest-even for BF16,
    round-and-saturate for INT8)."""
    v = np.asarray(values, dtype=np.float64)
    if fmt.kind is Kind.BF16:
        bits = v.astype(np.float32).view(np.uint32).astype(np.uint64)
        nan = np.isnan(v)
        lsb = (bits >> np.uint64(16)) & np.uint64(1)
        rounded = ((bits + np.uint64(0x7FFF) + lsb) >> np.uint64(16)).astype(np.uint16)
        # keep NaN a NaN: truncate and force a quiet mantissa bit
        nan_bits = ((bits >> np.uint64(16)) | np.uint64(0x0040)).astype(np.uint16)
        return np.where(nan, nan_bits, rounded).astype(np.uint16)
    codes = np.clip(np.rint(v / fmt.scale), -128, 127).astype(np.int8)
    return codes.view(np.uint8)


def encode(value: float, fmt: QuantFormat) -> int:
    return int(encode_array(np.array([value]), fmt)[0])


def flip_pattern(pattern: int, bit_position: int, fmt: QuantFormat) -> int:
    if not 0 <= bit_position < fmt.width:
        raise ValueError(f"bit {bit_position} out of range for {fmt.kind.value}")
    return _check_width(pattern, fmt) ^ (1 << bit_position)


def direction_of(pattern: int, bit_position: int) -> Direction:
    if (int(pattern) >> bit_position) & 1:
        return Direction.ONE_TO_ZERO
    return Direction.ZERO_TO_ONE


@lru_cache(maxsize=1)
def _bf16_flip_values() -> np.ndarray:
    # row p, column b -> decoded value of p with bit b flipped
    p = np.arange(1 << 16, dtype=np.uint32)[:, None]
    flipped = (p ^ (np.uint32(1) << np.arange(16, dtype=np.uint32))).astype(np.uint16)
    table = decode_array(flipped, BF16)
    table.setflags(write=False)
    return table


def flipped_values(patterns, fmt: QuantFormat) -> np.ndarray:
    """Decoded value after each single-bit flip, shape ``(n, width)``."""
    p = np.asarray(patterns).astype(np.int64).reshape(-1)
    if fmt.kind is Kind.BF16:
        return _bf16_flip_values()[p]
    bits = np.arange(8, dtype=np.int64)
    flipped = (p[:, None] ^ (1 << bits)).astype(np.uint8)
    return decode_array(flipped, fmt)


def enumerate_flips(pattern: int, fmt: QuantFormat) -> list[BitFlip]:
    pattern = _check_width(pattern, fmt)
    before = decode(pattern, fmt)
    after = flipped_values([pattern], fmt)[0]
    flips = []
    for bit in range(fmt.width):
        finite = bool(np.isfinite(after[bit]))
        # non-finite flips keep their raw difference (inf or nan) and are flagged
        delta = float(after[bit] - before)
        flips.append(BitFlip(bit, direction_of(pattern, bit), delta, finite))
    return flips


def in_range(value_after: float, layer_min: float, layer_max: float) -> bool:
    if not math.isfinite(value_after):
        return False
    return layer_min <= value_after <= layer_max


def valid_delta_matrix(patterns, fmt: QuantFormat, layer_min: float, layer_max: float):
    """``(|delta|, valid)`` arrays of shape ``(n, width)`` for a batch of patterns."""
    p = np.asarray(patterns).reshape(-1)
    before = decode_array(p, fmt)[:, None]
    after = flipped_values(p, fmt)
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(after) & (after >= layer_min) & (after <= layer_max)
        delta = np.where(valid, np.abs(after - before), 0.0)
    return delta, valid


def best_valid_flips(patterns, fmt: QuantFormat, layer_min: float, layer_max: float):
    """Per pattern: largest in-range ``|delta|`` and its bit (lowest bit on ties, -1 if none)."""
    delta, valid = valid_delta_matrix(patterns, fmt, layer_min, layer_max)
    best_bit = np.argmax(delta, axis=1)
    best = delta[np.arange(delta.shape[0]), best_bit]
    best_bit = np.where(valid.any(axis=1) & (best > 0), best_bit, -1)
    return np.where(best_bit >= 0, best, 0.0), best_bit


def max_valid_delta(pattern: int, fmt: QuantFormat, layer_min: float, layer_max: float) -> float:
    _check_width(pattern, fmt)
    best, _ = best_valid_flips(np.array([pattern], dtype=fmt.dtype), fmt, layer_min, layer_max)
    return float(best[0])


def max_perturbation_bound(fmt: QuantFormat, layer_min: float, layer_max: float) -> float:
    """Upper bound on any in-range single-flip ``|delta|`` within a layer.

    Both endpoints of an in-range flip lie in ``[layer_min, layer_max]``, so the
    width of the range bounds the move; an INT8 flip also moves at most
    ``128 * scale``.
    """
    width = float(layer_max) - float(layer_min)
    if fmt.kind is Kind.INT8:
        width = min(width, 128.0 * fmt.scale)
    return max(width, 0.0)
