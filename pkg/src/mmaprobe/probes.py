"""Test-vector generators and output classifiers for feature probing.

Each generator builds scalar MMA tests parameterized only by the input and
output precisions (plus previously inferred features) and pairs them with a
classifier that maps the observed outputs to a feature verdict.  Operands
are always exactly representable in the input format, every intended
product is exact, and rounding-sensitive probes ship both sign polarities;
classifiers judge the polarity pair jointly because directed rounding is
sign-asymmetric.

A classifier never guesses: observations matching no row yield the
``UNDETERMINED`` verdict.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .formats import (
    ONE,
    ZERO,
    Dyadic,
    FpFormat,
    Special,
    Value,
    pow2,
    sum_of_pow2,
)

__all__ = [
    "UNDETERMINED",
    "NotFactorable",
    "ProbeVector",
    "Verdict",
    "Probe",
    "factor_into_operands",
    "zero_pair",
    "gen_subnormal_probes",
    "gen_post_alignment_rounding_probe",
    "gen_rm_bfma_probe",
    "gen_alignment_bits_probe",
    "gen_alignment_cancel_probe",
    "gen_normalisation_probe",
    "gen_rm_mbfma_probe",
    "gen_ordering_probe",
    "width_test_vectors",
    "carry_test_vector",
    "carry_test_expected",
    "run_algorithm1",
    "Algorithm1Result",
]

UNDETERMINED = "Undetermined"


class NotFactorable(ValueError):
    """A product value cannot be split into two input-format operands."""


@dataclass(frozen=True)
class ProbeVector:
    """One scalar MMA test: accumulator input plus product operand pairs."""

    label: str
    c: Dyadic
    pairs: tuple[tuple[Dyadic, Dyadic], ...]

    @property
    def k(self) -> int:
        return len(self.pairs)

    def negated(self, label: Optional[str] = None) -> "ProbeVector":
        flipped = tuple((-a, b) for a, b in self.pairs)
        return ProbeVector(label or self.label + "-neg", -self.c, flipped)


@dataclass(frozen=True)
class Verdict:
    """Outcome of one probe: a feature name, a value, and raw evidence."""

    feature: str
    value: object
    evidence: tuple[tuple[str, str], ...] = ()

    @property
    def determinate(self) -> bool:
        return self.value != UNDETERMINED


def _fmt_value(v: Value) -> str:
    return repr(v)


@dataclass(frozen=True)
class Probe:
    """A set of vectors and an exact-match classifier over their outputs."""

    feature: str
    vectors: tuple[ProbeVector, ...]
    rows: tuple[tuple[tuple[Dyadic, ...], object], ...]
    note: str = ""

    def classify(self, observed: Sequence[Value]) -> Verdict:
        if len(observed) != len(self.vectors):
            raise ValueError("observation count does not match vector count")
        evidence = tuple(
            (vec.label, _fmt_value(d))
            for vec, d in zip(self.vectors, observed))
        if any(isinstance(d, Special) for d in observed):
            return Verdict(self.feature, UNDETERMINED, evidence)
        for expected, value in self.rows:
            if all(e == d for e, d in zip(expected, observed)):
                return Verdict(self.feature, value, evidence)
        return Verdict(self.feature, UNDETERMINED, evidence)


def factor_into_operands(r: Dyadic, fin: FpFormat) -> tuple[Dyadic, Dyadic]:
    """Split an exact product value into (a, b) with b a power of two.

    ``a`` carries the significand scaled into the normal binade [1, 2) and
    is then shifted so both operands stay inside the finite range of
    ``fin``; subnormal operands are used only when no normal split reaches
    the required exponent.
    """
    if r.is_zero:
        return ZERO, ZERO
    c = r.canonicalize()
    if c.sig.bit_length() > fin.precision:
        raise NotFactorable(
            f"{r!r} needs {c.sig.bit_length()} significand bits, "
            f"{fin.name} has {fin.precision}")
    target = c.floor_log2  # a * b == sig/2^(bits-1) * 2^(target)
    b_exp = min(max(target, fin.emin), fin.emax)
    a_exp = target - b_exp  # exponent of a's leading bit
    a = Dyadic.make(c.sign, c.sig, a_exp - (c.sig.bit_length() - 1))
    # a keeps its significand exact as long as its lowest bit stays on or
    # above the subnormal grid (normal a always does).
    if a_exp > fin.emax or a.exp < fin.emin - (fin.precision - 1):
        raise NotFactorable(f"exponent {target} unreachable in {fin.name}")
    if a_exp < fin.emin and not fin.subnormals:
        raise NotFactorable(
            f"{r!r} needs a subnormal operand and {fin.name} flushes them")
    return a, pow2(b_exp)


def zero_pair() -> tuple[Dyadic, Dyadic]:
    """Explicit zero filler product (never relies on backend zero-skip)."""
    return ZERO, ZERO


def _padded(pairs_by_pos: dict[int, tuple[Dyadic, Dyadic]],
            k: int) -> tuple[tuple[Dyadic, Dyadic], ...]:
    """Place 1-indexed live pairs into a zero-filled length-k tuple."""
    out = [zero_pair() for _ in range(k)]
    for pos, pair in pairs_by_pos.items():
        out[pos - 1] = pair
    return tuple(out)


# -- subnormal support -------------------------------------------------


def gen_subnormal_probes(fin: FpFormat, fout: FpFormat) -> tuple[Probe, Probe]:
    """Input-side and output-side subnormal support tests.

    Input side: the smallest positive subnormal of ``fin`` times one must
    come back unchanged.  Output side: an exact result below the smallest
    normal of ``fout``, produced by a product when the input exponent range
    reaches that low, else injected through the accumulator input.
    """
    tiny = fin.min_subnormal
    vec_in = ProbeVector("subnormal-in", ZERO, ((tiny, ONE),))
    probe_in = Probe(
        feature="subnormal_in",
        vectors=(vec_in,),
        rows=(((tiny,), True), ((ZERO,), False)),
    )

    target = pow2(fout.emin - 4)  # subnormal in fout for precision >= 5
    lowest_product = 2 * fin.emin
    if lowest_product <= target.floor_log2:
        a = fin.min_normal
        b = pow2(target.floor_log2 - fin.emin)
        vec_out = ProbeVector("subnormal-out-product", ZERO, ((a, b),))
    else:
        # Input range cannot reach the subnormal band; ride the c input.
        vec_out = ProbeVector("subnormal-out-addend", target, (zero_pair(),))
    probe_out = Probe(
        feature="subnormal_out",
        vectors=(vec_out,),
        rows=(((target,), True), ((ZERO,), False)),
    )
    return probe_in, probe_out


# -- rounding applied to each addend during significand alignment ------


def gen_post_alignment_rounding_probe(fin: FpFormat, fout: FpFormat,
                                      n_eab: int, j: int = 0) -> Probe:
    """Detect how bits shifted past the alignment boundary are reduced.

    With the alignment width known (0 or 1 extra bits), two products carry
    a value straddling the boundary; whether each is truncated or rounded
    during alignment shows up one representable bit above.  Valid for
    deferred accumulation and alignment widths up to one extra bit.
    """
    if n_eab not in (0, 1):
        raise ValueError("post-alignment probe handles n_eab in {0, 1} only")
    p = fout.precision
    r = pow2(-p + j - n_eab) + pow2(-p + j - n_eab - 1)
    pair = factor_into_operands(r, fin)
    pos = ProbeVector(f"post-align-round[n_eab={n_eab},j={j}]",
                      pow2(j), (pair, pair))
    neg = pos.negated()
    base = pow2(j)
    up = pow2(j) + pow2(-p + j + 2 - n_eab)
    return Probe(
        feature="rm_post_alignment",
        vectors=(pos, neg),
        rows=(
            ((base, -base), "Truncate"),
            ((up, -up), "RNE"),
            ((up, -base), "RU"),
            ((base, -up), "RD"),
        ),
    )


# -- final rounding of one block (RM-BFMA) -----------------------------


def gen_rm_bfma_probe(fin: FpFormat, fout: FpFormat, j: int = 0) -> Probe:
    """Detect the rounding mode of a block's single final conversion.

    Three unit products force two carries so the accumulated value needs a
    two-position normalisation shift; the accumulator input plants bits
    that end up just below the output precision only after that shift, so
    no bit is lost during alignment and only the final rounding acts.
    Requires width >= 3, two carry headroom bits, and deferred accumulation.
    """
    p = fout.precision
    c = pow2(j) + pow2(-p + j + 1) + pow2(-p + j + 2)
    unit = factor_into_operands(pow2(j), fin)
    pos = ProbeVector(f"rm-bfma[j={j}]", c, (unit, unit, unit))
    neg = pos.negated()
    base = pow2(j + 2)
    up = pow2(j + 2) + pow2(-p + j + 3)
    return Probe(
        feature="rm_bfma",
        vectors=(pos, neg),
        rows=(
            ((base, -base), "Truncate"),
            ((up, -up), "RNE"),
            ((up, -base), "RU"),
            ((base, -up), "RD"),
        ),
    )


# -- extra alignment bits ----------------------------------------------


def gen_alignment_bits_probe(fin: FpFormat, fout: FpFormat,
                             n: int, j: int = 0) -> Probe:
    """Ladder test for at least ``n`` extra alignment bits.

    A geometric ladder of products sums to exactly one representable bit
    above the output precision, but only if the two deepest terms survive
    alignment; with fewer extra bits they are truncated and the indicator
    bit never forms.  Requires ``n + 1`` products inside one block and
    deferred accumulation.  The indicator must appear on both polarities;
    a one-sided appearance is directed-rounding reconstruction, not
    alignment survival.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = fout.precision
    live: dict[int, tuple[Dyadic, Dyadic]] = {}
    for i in range(1, n):
        live[i] = factor_into_operands(pow2(-p - i + j + 1), fin)
    deep = factor_into_operands(pow2(-p + 1 - n + j), fin)
    live[n] = deep
    live[n + 1] = deep
    pos = ProbeVector(f"align-bits[n={n},j={j}]", pow2(j),
                      _padded(live, n + 1))
    neg = pos.negated()
    base = pow2(j)
    show = pow2(j) + pow2(-p + j + 1)
    return Probe(
        feature="n_eab_at_least",
        vectors=(pos, neg),
        rows=(
            ((show, -show), ("at_least", n)),
            ((base, -base), ("fewer_than", n)),
            ((show, -base), ("fewer_than", n)),
            ((base, -show), ("fewer_than", n)),
        ),
        note="indicator on one side only = rounding artefact, not survival",
    )


def gen_alignment_cancel_probe(fin: FpFormat, fout: FpFormat,
                               n: int, j: int = 0) -> Probe:
    """Cancellation cross-check for alignment depth ``n``.

    A unit product sets the reference exponent, a single bit rides ``n``
    positions below the output window, and a matching negative unit then
    cancels the reference.  After normalisation the surviving bit is exact
    and representable, so the outcome is rounding-mode independent: the
    bit itself if alignment kept it, zero if alignment dropped it.  Needs
    three products and deferred accumulation, but no accumulator input, so
    it also applies when the addend never joins a block.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = fout.precision
    probe_bit = pow2(-p + 1 - n + j)
    unit = factor_into_operands(pow2(j), fin)
    neg_unit = factor_into_operands(-pow2(j), fin)
    bit_pair = factor_into_operands(probe_bit, fin)
    pos = ProbeVector(f"align-cancel[n={n},j={j}]", ZERO,
                      (unit, bit_pair, neg_unit))
    neg = pos.negated()
    return Probe(
        feature="n_eab_at_least",
        vectors=(pos, neg),
        rows=(
            ((probe_bit, -probe_bit), ("at_least", n)),
            ((ZERO, ZERO), ("fewer_than", n)),
        ),
    )


# -- normalisation timing ----------------------------------------------


def gen_normalisation_probe(fin: FpFormat, fout: FpFormat, case: str,
                            t: int = 3) -> Probe:
    """Immediate-versus-deferred normalisation test.

    ``case='carry_only'`` (extra carry bits, no extra alignment bits):
    three small products push a near-two accumulator over the carry
    boundary; an immediately normalising unit loses them at alignment one
    by one, a deferred unit keeps them all.  ``case='carry_and_align'``
    (both kinds of extra bits): two products plant a bit pattern whose
    intermediate sum needs rounding, separating immediate rounding flavors
    from the exact deferred path; ``t >= 3`` keeps a gap between the low
    bits so the carry reaches the top.
    """
    p = fout.precision
    if case == "carry_only":
        c = Dyadic.from_int(2) - pow2(-p + 1)
        pair = factor_into_operands(pow2(-p + 1), fin)
        pos = ProbeVector("norm[carry-only]", c, (pair, pair, pair))
        neg = pos.negated()
        two = Dyadic.from_int(2)
        deferred = two + pow2(-p + 2)
        return Probe(
            feature="immediate_norm",
            vectors=(pos, neg),
            rows=(
                ((two, -two), True),
                ((deferred, -deferred), False),
            ),
        )
    if case == "carry_and_align":
        if t < 3:
            raise ValueError("t must be >= 3")
        c = ONE - pow2(-p + t)
        pair = factor_into_operands(pow2(-p + t) + pow2(-p), fin)
        pos = ProbeVector(f"norm[carry-and-align,t={t}]", c, (pair, pair))
        neg = pos.negated()
        base = ONE + pow2(-p + t)
        imm_up = base + pow2(-p + 2)
        deferred = base + pow2(-p + 1)
        return Probe(
            feature="immediate_norm",
            vectors=(pos, neg),
            rows=(
                ((base, -base), True),          # immediate, RZ/RD/RNE/trunc
                ((imm_up, -base), True),        # immediate, RU
                ((base, -imm_up), True),        # immediate, RD
                ((deferred, -deferred), False),
            ),
        )
    raise ValueError(f"unknown normalisation case {case!r}")


# -- rounding when block results combine (RM-MBFMA) --------------------


def gen_rm_mbfma_probe(fin: FpFormat, fout: FpFormat, n_fma: int,
                       j: int = 0, n_eab: Optional[int] = None,
                       live_position: Optional[int] = None) -> Probe:
    """Detect the rounding mode used to combine two block results.

    The default vectors put a half-ulp-and-guard value in the first slot
    of the second block; they need at least one extra alignment bit so the
    half-ulp survives the combine alignment.  When the alignment width is
    zero or unknown, a carry variant is used instead: the combine overflows
    into the next binade, the normalisation shift exposes sub-ulp bits and
    only the final combine rounding decides.  ``live_position`` moves the
    live product when the accumulator input rides a block other than the
    first.
    """
    if n_fma < 1:
        raise ValueError("n_fma must be >= 1")
    p = fout.precision
    pos_idx = live_position if live_position is not None else n_fma + 1
    k = max(n_fma + 1, pos_idx)
    if n_eab is not None and n_eab >= 1:
        c = pow2(j) + pow2(-p + j + 1)
        pair = factor_into_operands(pow2(-p + j) + pow2(-p + j - 1), fin)
        label = f"rm-mbfma[j={j}]"
        lo = pow2(j) + pow2(-p + j + 1)
        hi = pow2(j) + pow2(-p + j + 2)
    else:
        c = pow2(j) + pow2(-p + j + 1) + pow2(-p + j + 2)
        pair = factor_into_operands(pow2(j), fin)
        label = f"rm-mbfma-carry[j={j}]"
        lo = pow2(j + 1) + pow2(-p + j + 2)
        hi = pow2(j + 1) + pow2(-p + j + 3)
    pos = ProbeVector(label, c, _padded({pos_idx: pair}, k))
    neg = pos.negated()
    return Probe(
        feature="rm_mbfma",
        vectors=(pos, neg),
        rows=(
            ((lo, -lo), "Truncate"),
            ((hi, -hi), "RNE"),
            ((hi, -lo), "RU"),
            ((lo, -hi), "RD"),
        ),
    )


# -- combine ordering ---------------------------------------------------


def gen_ordering_probe(fin: FpFormat, fout: FpFormat, n_fma: int,
                       j: int = 0) -> Probe:
    """Identify which partial sum the accumulator input joins first.

    Three assignments rotate a cancelling pair and a far-sub-ulp survivor
    among the accumulator input and the two blocks of a two-block tile.
    Exactly one assignment lets the survivor escape cancellation, and
    which one it is names the ordering.  Assumes two blocks per inner
    product and at most three extra alignment bits (the survivor must be
    truncated whenever it aligns against a unit exponent).
    """
    p = fout.precision
    tiny = pow2(-p - 3 + j)
    unit = pow2(j)
    k = 2 * n_fma
    u_pair = factor_into_operands(unit, fin)
    nu_pair = factor_into_operands(-unit, fin)
    t_pair = factor_into_operands(tiny, fin)
    v1 = ProbeVector(f"ordering-P1[j={j}]", unit,
                     _padded({1: nu_pair, n_fma + 1: t_pair}, k))
    v2 = ProbeVector(f"ordering-P2[j={j}]", tiny,
                     _padded({1: u_pair, n_fma + 1: nu_pair}, k))
    v3 = ProbeVector(f"ordering-P3[j={j}]", unit,
                     _padded({1: t_pair, n_fma + 1: nu_pair}, k))
    return Probe(
        feature="ordering",
        vectors=(v1, v2, v3),
        rows=(
            ((tiny, ZERO, ZERO), "CFirst"),
            ((ZERO, tiny, ZERO), "TreeThenC"),
            ((ZERO, ZERO, tiny), "CWithLast"),
        ),
    )


# -- width and carry-bit search -----------------------------------------


def width_test_vectors(k: int, fin: FpFormat,
                       fout: FpFormat) -> list[ProbeVector]:
    """Boundary-detection vectors for shared dimension ``k``.

    Three families, each issued in both polarities, all with the same
    property: a single block keeps their sum exact, while a block split at
    any smaller width loses a fine bit to rounding or alignment in at
    least one polarity.

    * head: the fine-carrying accumulator input meets a unit product in
      the first slot, the trailing fine product sits at position ``k``.
    * tail: the mirror image, for units that fold the accumulator input
      into the last block.
    * cancel variants of both: the trailing fine product negated, so the
      exact total is a clean power of two.  After a block rounds the
      carry-and-fine value toward zero, subtracting the fine bit lands on
      an exactly representable value, which no combine rounding mode can
      pull back to the total; this defeats opposing-mode pairs whose
      errors otherwise cancel across the two stages.
    * straddle and straddle-cancel (k >= 4): two unit-plus-fine pairs at
      the extreme ends with no accumulator involvement, for units that
      combine block results before the addend joins.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    p = fout.precision
    fine = pow2(-p + 1)
    unit_pair = factor_into_operands(ONE, fin)
    fine_pair = factor_into_operands(fine, fin)
    neg_fine_pair = factor_into_operands(-fine, fin)
    c = ONE + fine
    out = []
    head = ProbeVector(f"width-head[k={k}]", c,
                       _padded({1: unit_pair, k: fine_pair}, k))
    tail = ProbeVector(f"width-tail[k={k}]", c,
                       _padded({1: fine_pair, k: unit_pair}, k))
    head_cancel = ProbeVector(f"width-head-cancel[k={k}]", c,
                              _padded({1: unit_pair, k: neg_fine_pair}, k))
    tail_cancel = ProbeVector(f"width-tail-cancel[k={k}]", c,
                              _padded({1: neg_fine_pair, k: unit_pair}, k))
    out += [head, head.negated(), tail, tail.negated(),
            head_cancel, head_cancel.negated(),
            tail_cancel, tail_cancel.negated()]
    if k >= 4:
        straddle = ProbeVector(
            f"width-straddle[k={k}]", ZERO,
            _padded({1: unit_pair, 2: fine_pair,
                     k - 1: unit_pair, k: fine_pair}, k))
        straddle_cancel = ProbeVector(
            f"width-straddle-cancel[k={k}]", ZERO,
            _padded({1: unit_pair, 2: fine_pair,
                     k - 1: unit_pair, k: neg_fine_pair}, k))
        out += [straddle, straddle.negated(),
                straddle_cancel, straddle_cancel.negated()]
    return out


def width_test_expected(vec: ProbeVector) -> Dyadic:
    """Exact sum a split-free unit must return for a width test vector."""
    acc = vec.c
    for a, b in vec.pairs:
        acc = acc + a * b
    return acc


def carry_test_vector(k: int, fin: FpFormat, fout: FpFormat) -> ProbeVector:
    """Carry-headroom test at shared dimension ``k``.

    ``k - 1`` products of the largest value below two maximize the run of
    carries; the accumulator input carries marker bits that end up exactly
    at the last representable position after the carries shift the window,
    and the final product keeps the low end alive.  The sum is exact and
    representable, so any loss means the carries exceeded the headroom.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    p_in, p_out = fin.precision, fout.precision
    big = Dyadic.from_int(2) - pow2(1 - p_in)
    big_pair = factor_into_operands(big, fin)
    fine_pair = factor_into_operands(pow2(-p_out + 1), fin)
    m = (k - 1).bit_length()  # ceil(log2(k)) marker bits above the probe bit
    c = big + sum_of_pow2(-p_out + i for i in range(1, m + 1))
    live = {i: big_pair for i in range(1, k)}
    live[k] = fine_pair
    return ProbeVector(f"carry[k={k}]", c, _padded(live, k))


def carry_test_expected(vec: ProbeVector) -> Dyadic:
    return width_test_expected(vec)


@dataclass
class Algorithm1Result:
    """Outcome of the iterative width / carry-bit search."""

    n_fma: Optional[int]
    n_ecb: int
    conclusive: bool
    k_stop: int
    mismatch_labels: tuple[str, ...] = ()
    carry_matches: tuple[int, ...] = ()


def run_algorithm1(evaluate: Callable[[Dyadic, ProbeVector], Value],
                   fin: FpFormat, fout: FpFormat, k_max: int,
                   extended: bool = False) -> Algorithm1Result:
    """Iterative search for the FMA width and detectable carry bits.

    Per shared dimension ``k`` starting at two: run the boundary test in
    both polarities (if EITHER magnitude differs from the exact sum the
    width is ``k - 1`` and the loop stops), then the carry test, recording
    ``floor(log2(k * (2 - 2^(1-p_in))))`` whenever it comes back exact.
    ``extended`` adds the mirrored and straddle boundary vectors, which
    catch block splits that the head vectors cannot see when the
    accumulator input joins a different partial sum.

    ``evaluate`` receives the exact expected value and the vector and must
    return the device output; ``k_max`` exhaustion without a mismatch is
    reported as inconclusive (width at least ``k_max``).
    """
    from .simulator import max_detectable_carry_bits

    n_ecb = 0
    carry_matches: list[int] = []
    k = 2
    while k <= k_max:
        vectors = width_test_vectors(k, fin, fout)
        if not extended:
            vectors = vectors[:2]  # head pair only: the published loop
        mismatched: list[str] = []
        for vec in vectors:
            expected = width_test_expected(vec)
            d = evaluate(expected, vec)
            if isinstance(d, Special) or abs(d) != abs(expected):
                mismatched.append(vec.label)
        if mismatched:
            return Algorithm1Result(
                n_fma=k - 1, n_ecb=n_ecb, conclusive=True, k_stop=k,
                mismatch_labels=tuple(mismatched),
                carry_matches=tuple(carry_matches))
        cvec = carry_test_vector(k, fin, fout)
        expected = carry_test_expected(cvec)
        d = evaluate(expected, cvec)
        if not isinstance(d, Special) and d == expected:
            n_ecb = max_detectable_carry_bits(k, fin.precision)
            carry_matches.append(k)
        k += 1
    return Algorithm1Result(
        n_fma=None, n_ecb=n_ecb, conclusive=False, k_stop=k_max,
        carry_matches=tuple(carry_matches))
