import math
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keyflip import bitcodec
from keyflip.bitcodec import BF16, Direction, QuantFormat

ALL_BF16 = np.arange(1 << 16, dtype=np.uint16)
ALL_INT8 = np.arange(256, dtype=np.uint8)


def ref_bf16(pattern: int) -> float:
    # independent oracle: big-endian float32 bytes through struct
    return struct.unpack(">f", struct.pack(">I", pattern << 16))[0]


def ref_int8(code: int, scale: float) -> float:
    signed = code - 256 if code >= 128 else code
    return signed * scale


def test_decode_matches_struct_oracle_for_every_bf16_pattern():
    got = bitcodec.decode_array(ALL_BF16, BF16)
    want = np.array([ref_bf16(int(p)) for p in ALL_BF16])
    same = (got == want) | (np.isnan(got) & np.isnan(want))
    assert same.all()


def test_decode_examples():
    assert bitcodec.decode(0x3F80, BF16) == 1.0
    assert bitcodec.decode(0x0000, BF16) == 0.0
    assert bitcodec.decode(0b00000101, QuantFormat.int8(1.0)) == 5.0
    assert bitcodec.decode(0x7F80, BF16) == math.inf
    assert math.isnan(bitcodec.decode(0x7FC0, BF16))
    assert bitcodec.decode(0x0001, BF16) == 2.0 ** -133  # smallest subnormal


def test_bf16_round_trip_exhaustive():
    vals = bitcodec.decode_array(ALL_BF16, BF16)
    back = bitcodec.encode_array(vals, BF16)
    nan = np.isnan(vals)
    assert (back[~nan] == ALL_BF16[~nan]).all()
    # NaN patterns come back as NaN patterns
    assert np.isnan(bitcodec.decode_array(back[nan], BF16)).all()


@pytest.mark.parametrize("scale", [1.0, 0.0123, 3.5])
def test_int8_round_trip_exhaustive(scale):
    fmt = QuantFormat.int8(scale)
    vals = bitcodec.decode_array(ALL_INT8, fmt)
    assert np.array_equal(vals, [ref_int8(int(c), fmt.scale) for c in ALL_INT8])
    assert np.array_equal(bitcodec.encode_array(vals, fmt), ALL_INT8)


def test_flip_involution_exhaustive():
    for fmt, pats in ((BF16, ALL_BF16), (QuantFormat.int8(0.5), ALL_INT8)):
        for bit in range(fmt.width):
            mask = pats.dtype.type(1 << bit)
            assert np.array_equal((pats ^ mask) ^ mask, pats)
    assert bitcodec.flip_pattern(bitcodec.flip_pattern(0x3F80, 15, BF16), 15, BF16) == 0x3F80


def test_encode_rounds_to_nearest_even():
    # 1 + 2^-8 sits exactly between 1.0 and 1 + 2^-7
    assert bitcodec.encode(1.0 + 2.0 ** -8, BF16) == 0x3F80
    assert bitcodec.encode(1.0 + 3 * 2.0 ** -8, BF16) == 0x3F82
    assert bitcodec.encode(1000.0, QuantFormat.int8(1.0)) == 127


def test_enumerate_flips_examples():
    flips = bitcodec.enumerate_flips(0x3F80, BF16)
    assert len(flips) == 16
    assert flips[15].delta_w == -2.0 and flips[15].direction is Direction.ZERO_TO_ONE
    assert not flips[14].finite and math.isinf(bitcodec.decode(0x3F80 ^ (1 << 14), BF16))
    f7 = bitcodec.enumerate_flips(5, QuantFormat.int8(1.0))[7]
    assert f7.delta_w == -128.0 and bitcodec.decode(5 ^ 0x80, QuantFormat.int8(1.0)) == -123.0


def test_directions_follow_prior_bit():
    for f in bitcodec.enumerate_flips(0x3F80, BF16):
        want = Direction.ONE_TO_ZERO if (0x3F80 >> f.bit_position) & 1 else Direction.ZERO_TO_ONE
        assert f.direction is want


def test_bad_widths_rejected():
    with pytest.raises(ValueError):
        bitcodec.decode(1 << 16, BF16)
    with pytest.raises(ValueError):
        bitcodec.flip_pattern(0, 8, QuantFormat.int8(1.0))
    with pytest.raises(ValueError):
        QuantFormat.int8(0.0)
    with pytest.raises(ValueError):
        QuantFormat.int8(math.nan)


def test_flip_deltas_exact_where_representable():
    """decode(p) + delta == decode(flipped) whenever the difference fits in
    float64; otherwise delta is the correctly rounded difference."""
    table = bitcodec._bf16_flip_values()
    before = bitcodec.decode_array(ALL_BF16, BF16)[:, None]
    finite = np.isfinite(table) & np.isfinite(before)
    a = np.broadcast_to(before, table.shape)[finite]
    b = table[finite]
    d = b - a
    # TwoSum error term of b + (-a); zero means the difference is exact
    y = d - b
    err = (b - (d - y)) + (-a - y)
    exact = err == 0
    assert (a[exact] + d[exact] == b[exact]).all()
    rng = np.random.default_rng(0)
    inexact = np.flatnonzero(~exact)
    for i in rng.choice(inexact, size=min(500, inexact.size), replace=False):
        true = Fraction(float(b[i])) - Fraction(float(a[i]))
        assert float(true) == d[i]


def test_int8_deltas_exact():
    fmt = QuantFormat.int8(0.0123)
    for code in range(256):
        before = bitcodec.decode(code, fmt)
        for f in bitcodec.enumerate_flips(code, fmt):
            assert before + f.delta_w == bitcodec.decode(code ^ (1 << f.bit_position), fmt)


def test_in_range_examples():
    assert bitcodec.in_range(0.5, -1, 1)
    assert not bitcodec.in_range(math.inf, -1e300, 1e300)
    assert not bitcodec.in_range(math.nan, -1, 1)
    assert bitcodec.in_range(1.0, -1, 1)
    assert not bitcodec.in_range(1.0000001, -1, 1)


def test_max_valid_delta_examples():
    assert bitcodec.max_valid_delta(0, QuantFormat.int8(1.0), -128, 127) == 128.0
    assert bitcodec.max_valid_delta(0x3F80, BF16, 1.0, 1.0) == 0.0
    assert bitcodec.max_valid_delta(0x5, QuantFormat.int8(1.0), 5.0, 5.0) == 0.0
    # exhaustive over the 16 flips of 1.0 in [-2, 2]: the sign flip (|delta| = 2) wins
    assert bitcodec.max_valid_delta(0x3F80, BF16, -2.0, 2.0) == 2.0


def brute_max(pattern, fmt, lo, hi):
    best = 0.0
    v = bitcodec.decode(pattern, fmt)
    for bit in range(fmt.width):
        after = bitcodec.decode(pattern ^ (1 << bit), fmt)
        if math.isfinite(after) and lo <= after <= hi:
            best = max(best, abs(after - v))
    return best


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 0xFFFF), st.floats(-4, 4), st.floats(0, 8))
def test_max_valid_delta_matches_brute_force_bf16(pattern, lo, width):
    assert bitcodec.max_valid_delta(pattern, BF16, lo, lo + width) == brute_max(pattern, BF16, lo, lo + width)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 255), st.floats(1e-3, 2.0), st.integers(-128, 127), st.integers(0, 255))
def test_max_valid_delta_matches_brute_force_int8(code, scale, lo_code, span):
    fmt = QuantFormat.int8(scale)
    lo, hi = lo_code * scale, min(lo_code + span, 127) * scale
    assert bitcodec.max_valid_delta(code, fmt, lo, hi) == brute_max(code, fmt, lo, hi)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 0xFFFF), st.floats(-3, 0), st.floats(0, 3))
def test_perturbation_bound_dominates(pattern, lo, hi):
    v = bitcodec.decode(pattern, BF16)
    lo, hi = min(lo, v) if math.isfinite(v) else lo, max(hi, v) if math.isfinite(v) else hi
    assert bitcodec.max_valid_delta(pattern, BF16, lo, hi) <= bitcodec.max_perturbation_bound(BF16, lo, hi)


def test_best_valid_flips_reports_missing_moves():
    # code 0 in [-1, 1] with scale 1: bit 0 gives +1; nothing else stays in range
    best, bit = bitcodec.best_valid_flips(np.array([0], np.uint8), QuantFormat.int8(1.0), -1.0, 1.0)
    assert best[0] == 1.0 and bit[0] == 0
    # 0.0 in BF16: +/-0 flips differ only in sign, giving two zero moves; no positive move in [0, 0]
    best, bit = bitcodec.best_valid_flips(np.array([0], np.uint16), BF16, 0.0, 0.0)
    assert bit[0] == -1 and best[0] == 0.0


def test_int8_scale_is_trimmed_once():
    fmt = QuantFormat.int8(0.0123)
    assert abs(fmt.scale - 0.0123) < 1e-11
    assert QuantFormat.int8(fmt.scale).scale == fmt.scale
