"""Format decode/encode and exact-value arithmetic tests.

Expected values come from independent oracles: the host's IEEE 754
`struct` codecs for the interchange formats, and Fraction arithmetic with
a brute-force grid search for the rounding kernels.
"""

import math
import struct
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmaprobe.formats import (
    NAN,
    NEG_INF,
    NEG_ZERO,
    ONE,
    POS_INF,
    REGISTRY,
    ZERO,
    Dyadic,
    RoundingMode,
    Special,
    bits_to_hex,
    decode,
    encode,
    hex_to_bits,
    lookup_format,
    pow2,
    round_to_grid,
    round_to_precision,
    sum_of_pow2,
)

B16 = REGISTRY["binary16"]
BF16 = REGISTRY["bfloat16"]
TF32 = REGISTRY["TensorFloat32"]
B32 = REGISTRY["binary32"]
B64 = REGISTRY["binary64"]

ALL_RMS = (RoundingMode.RNE, RoundingMode.RZ, RoundingMode.RU,
           RoundingMode.RD, RoundingMode.TRUNCATE)


def dyadics(max_bits=64, max_exp=64):
    return st.builds(
        lambda s, m, e: Dyadic.make(s, m, e),
        st.sampled_from((1, -1)),
        st.integers(min_value=0, max_value=(1 << max_bits) - 1),
        st.integers(min_value=-max_exp, max_value=max_exp),
    )


# -- Dyadic arithmetic vs Fraction oracle -------------------------------


class TestDyadic:
    def test_constructors(self):
        assert pow2(0) == ONE
        assert sum_of_pow2([0, -23]) == ONE + pow2(-23)
        assert sum_of_pow2([]) == ZERO
        assert Dyadic.from_int(-6) == Dyadic(-1, 3, 1)

    def test_canonical_form(self):
        v = Dyadic(1, 12, 0)
        assert not v.is_canonical
        assert v.canonicalize() == Dyadic(1, 3, 2)
        assert ZERO.is_canonical
        assert not NEG_ZERO.is_canonical
        assert NEG_ZERO.canonicalize() == ZERO

    def test_negative_zero_compares_equal(self):
        assert NEG_ZERO == ZERO
        assert not NEG_ZERO < ZERO

    @given(dyadics(), dyadics())
    def test_add_matches_fraction(self, a, b):
        assert (a + b).as_fraction() == a.as_fraction() + b.as_fraction()

    @given(dyadics(), dyadics())
    def test_mul_matches_fraction(self, a, b):
        assert (a * b).as_fraction() == a.as_fraction() * b.as_fraction()

    @given(dyadics(), dyadics())
    def test_sub_matches_fraction(self, a, b):
        assert (a - b).as_fraction() == a.as_fraction() - b.as_fraction()

    @given(dyadics(), dyadics())
    def test_comparisons_match_fraction(self, a, b):
        assert (a < b) == (a.as_fraction() < b.as_fraction())
        assert (a == b) == (a.as_fraction() == b.as_fraction())

    @given(dyadics())
    def test_results_are_canonical(self, a):
        assert (a + a).is_canonical or (a + a).is_zero
        assert (a * a).is_canonical or (a * a).is_zero


# -- rounding kernels ----------------------------------------------------


def oracle_round_to_grid(v: Dyadic, grid: int, rm: RoundingMode) -> Fraction:
    """Independent rounding via Fraction floor/ceil on the grid."""
    x = v.as_fraction() / Fraction(2) ** grid
    lo = math.floor(x)
    hi = math.ceil(x)
    if lo == hi:
        q = lo
    elif rm in (RoundingMode.RZ, RoundingMode.TRUNCATE):
        q = lo if x > 0 else hi
    elif rm is RoundingMode.RU:
        q = hi
    elif rm is RoundingMode.RD:
        q = lo
    else:
        frac = x - lo
        if frac > Fraction(1, 2):
            q = hi
        elif frac < Fraction(1, 2):
            q = lo
        else:
            q = lo if lo % 2 == 0 else hi
    return q * Fraction(2) ** grid


class TestRounding:
    def test_precision_examples(self):
        v = ONE + pow2(-23) + Dyadic.make(1, 3, -25)
        assert round_to_precision(v, 24, RoundingMode.RNE) == ONE + pow2(-22)
        assert round_to_precision(
            v, 24, RoundingMode.TRUNCATE) == ONE + pow2(-23)
        w = -(Dyadic.from_int(2) - pow2(-27))
        assert round_to_precision(w, 24, RoundingMode.RNE) \
            == Dyadic.from_int(-2)

    @given(dyadics(max_bits=40, max_exp=40), st.integers(-60, 60),
           st.sampled_from(ALL_RMS))
    def test_grid_matches_oracle(self, v, grid, rm):
        got = round_to_grid(v, grid, rm)
        assert got.as_fraction() == oracle_round_to_grid(v, grid, rm)

    @given(dyadics(max_bits=40, max_exp=30), st.integers(1, 30),
           st.sampled_from(ALL_RMS))
    def test_precision_matches_oracle(self, v, p, rm):
        got = round_to_precision(v, p, rm)
        if v.is_zero:
            assert got.is_zero
            return
        grid = v.canonicalize().floor_log2 - p + 1
        expected = oracle_round_to_grid(v, grid, rm)
        # A carry out of the top bit re-runs on the coarser grid.
        if expected != got.as_fraction():
            expected = oracle_round_to_grid(v, grid + 1, rm)
        assert got.as_fraction() == expected
        assert got.bit_count <= p

    @given(dyadics(max_bits=40, max_exp=30), st.integers(1, 30))
    def test_directed_bracketing(self, v, p):
        ru = round_to_precision(v, p, RoundingMode.RU)
        rd = round_to_precision(v, p, RoundingMode.RD)
        rz = round_to_precision(v, p, RoundingMode.RZ)
        rne = round_to_precision(v, p, RoundingMode.RNE)
        assert rd <= v <= ru
        assert abs(rz) <= abs(v)
        assert rne == ru or rne == rd

    @given(dyadics(max_bits=40, max_exp=30), st.integers(1, 30))
    def test_truncate_is_rz(self, v, p):
        assert round_to_precision(v, p, RoundingMode.TRUNCATE) \
            == round_to_precision(v, p, RoundingMode.RZ)

    @given(st.integers(0, (1 << 30) - 1), st.integers(0, (1 << 30) - 1),
           st.integers(1, 20), st.sampled_from(ALL_RMS))
    def test_monotone_on_positives(self, m1, m2, p, rm):
        a, b = Dyadic.make(1, m1, -15), Dyadic.make(1, m2, -15)
        if a > b:
            a, b = b, a
        assert round_to_precision(a, p, rm) <= round_to_precision(b, p, rm)


# -- decode --------------------------------------------------------------


def struct_decode(bits: int, fmt) -> float:
    code = {16: ">e", 32: ">f", 64: ">d"}[fmt.storage_bits]
    return struct.unpack(code, bits.to_bytes(fmt.storage_bits // 8, "big"))[0]


class TestDecode:
    def test_examples(self):
        assert decode(0x3C00, B16) == ONE
        assert decode(0x0001, B16) == pow2(-24)
        assert decode(0x3F800001, B32) == ONE + pow2(-23)

    def test_specials(self):
        assert decode(0x7C00, B16) is POS_INF
        assert decode(0xFC00, B16) is NEG_INF
        assert decode(0x7E00, B16).is_nan
        assert decode(0x8000, B16) == ZERO
        assert decode(0x8000, B16).sign == -1

    @pytest.mark.parametrize("fmt", [B16, B32, B64], ids=lambda f: f.name)
    def test_against_host_codec(self, fmt):
        rng_samples = [0, 1, 2, 0x8000 % (1 << fmt.storage_bits)]
        step = max(1, (1 << fmt.storage_bits) // 4096)
        patterns = set(range(0, 1 << fmt.storage_bits, step)) | {
            (1 << fmt.storage_bits) - 1} | set(rng_samples)
        for bits in patterns:
            v = decode(bits, fmt)
            f = struct_decode(bits, fmt)
            if isinstance(v, Special):
                if v.is_nan:
                    assert math.isnan(f)
                else:
                    assert math.isinf(f) and (f > 0) == (v is POS_INF)
            elif not v.is_zero:
                assert v.as_fraction() == Fraction(f)
            else:
                assert f == 0.0

    def test_tensorfloat32_padding_ignored(self):
        base = 0x3F800000  # one, in the 32-bit container
        noisy = base | 0x1FFF  # all padding bits set
        assert decode(base, TF32) == ONE
        assert decode(noisy, TF32) == ONE


# -- encode --------------------------------------------------------------


class TestEncode:
    def test_tie_to_even(self):
        bits, fl = encode(ONE + pow2(-24), B32, RoundingMode.RNE)
        assert bits == 0x3F800000 and fl.inexact

    def test_round_up(self):
        bits, fl = encode(ONE + pow2(-24), B32, RoundingMode.RU)
        assert bits == 0x3F800001 and fl.inexact

    def test_near_two_exact(self):
        v = Dyadic.from_int(2) - pow2(-10)
        for rm in ALL_RMS:
            bits, fl = encode(v, B16, rm)
            assert not fl.inexact
            assert decode(bits, B16) == v

    def test_overflow_rules(self):
        huge = pow2(200)
        bits, fl = encode(huge, B32, RoundingMode.RNE)
        assert decode(bits, B32) is POS_INF and fl.overflow
        bits, _ = encode(huge, B32, RoundingMode.RZ)
        assert decode(bits, B32) == B32.max_finite
        bits, _ = encode(-huge, B32, RoundingMode.RU)
        assert decode(bits, B32) == -B32.max_finite
        bits, _ = encode(-huge, B32, RoundingMode.RD)
        assert decode(bits, B32) is NEG_INF

    def test_subnormal_flush_flag(self):
        from mmaprobe.formats import FpFormat
        ftz = FpFormat("b16ftz", precision=11, exp_bits=5, storage_bits=16,
                       subnormals=False)
        bits, fl = encode(pow2(-24), ftz, RoundingMode.RNE)
        assert bits == 0 and fl.underflow_flush
        # Same value encodes exactly once subnormals are allowed.
        bits, fl = encode(pow2(-24), B16, RoundingMode.RNE)
        assert bits == 0x0001 and not fl.inexact

    def test_specials_canonical(self):
        nan_bits, _ = encode(NAN, B32)
        assert nan_bits == 0x7FC00000
        inf_bits, _ = encode(POS_INF, B16)
        assert inf_bits == 0x7C00
        ninf_bits, _ = encode(NEG_INF, B16)
        assert ninf_bits == 0xFC00


def _finite_patterns(fmt):
    if fmt.storage_bits <= 16:
        return range(1 << 16)
    if fmt is TF32:
        upper = []
        for hi in range(1 << 19):
            upper.append(hi << 13)
        return upper
    # Wide formats: all exponents with edge and pseudo-random fractions.
    frac_w = fmt.precision - 1
    fracs = {0, 1, (1 << frac_w) - 1, 1 << (frac_w - 1), 0x5A5A5 % (1 << frac_w)}
    out = []
    for sign in (0, 1):
        for e in range(1 << fmt.exp_bits):
            for f in fracs:
                out.append((sign << (fmt.storage_bits - 1))
                           | (e << (frac_w + fmt.pad_bits))
                           | (f << fmt.pad_bits))
    return out


@pytest.mark.parametrize("fmt", [B16, BF16, TF32, B32, B64],
                         ids=lambda f: f.name)
def test_roundtrip_all_finite_patterns(fmt):
    """encode(decode(b)) == b for every finite pattern, under every mode."""
    for bits in _finite_patterns(fmt):
        v = decode(bits, fmt)
        if isinstance(v, Special):
            continue
        for rm in ALL_RMS:
            back, fl = encode(v, fmt, rm)
            assert back == bits and not fl.inexact, (hex(bits), rm)


def test_hex_rendering():
    assert bits_to_hex(0x3C00, B16) == "3c00"
    assert bits_to_hex(0x1, B32) == "00000001"
    assert hex_to_bits("3C00", B16) == 0x3C00
    assert hex_to_bits("0x3c00", B16) == 0x3C00
    with pytest.raises(ValueError):
        hex_to_bits("3c0", B16)


def test_registry_layout():
    assert B16.precision == 11 and B16.exp_bits == 5
    assert BF16.precision == 8 and BF16.exp_bits == 8
    assert TF32.precision == 11 and TF32.exp_bits == 8
    assert TF32.storage_bits == 32 and TF32.pad_bits == 13
    assert B32.precision == 24 and B32.exp_bits == 8
    assert B64.precision == 53 and B64.exp_bits == 11
    assert lookup_format("tf32") is TF32
    assert lookup_format("binary16") is B16
    with pytest.raises(KeyError):
        lookup_format("binary8")
