"""Probe generator and classifier tests, driven through the simulator."""

import pytest

from mmaprobe.formats import (
    ONE,
    REGISTRY,
    ZERO,
    Dyadic,
    FpFormat,
    RoundingMode,
    pow2,
)
from mmaprobe.probes import (
    NotFactorable,
    Probe,
    ProbeVector,
    carry_test_expected,
    carry_test_vector,
    factor_into_operands,
    gen_alignment_bits_probe,
    gen_alignment_cancel_probe,
    gen_normalisation_probe,
    gen_ordering_probe,
    gen_post_alignment_rounding_probe,
    gen_rm_bfma_probe,
    gen_rm_mbfma_probe,
    gen_subnormal_probes,
    run_algorithm1,
    width_test_expected,
    width_test_vectors,
)
from mmaprobe.simulator import (
    AlignmentPolicy,
    BlockFmaConfig,
    NormPolicy,
    Ordering,
    mma_dot,
)

B16 = REGISTRY["binary16"]
BF16 = REGISTRY["bfloat16"]
TF32 = REGISTRY["TensorFloat32"]
B32 = REGISTRY["binary32"]

RM = RoundingMode


def eval_probe(probe: Probe, cfg: BlockFmaConfig, fout=B32):
    observed = [mma_dot(v.c, [a for a, _ in v.pairs], [b for _, b in v.pairs],
                        cfg, fout) for v in probe.vectors]
    return probe.classify(observed)


def sim_eval(cfg, fout=B32):
    def evaluate(_expected, vec: ProbeVector):
        return mma_dot(vec.c, [a for a, _ in vec.pairs],
                       [b for _, b in vec.pairs], cfg, fout)
    return evaluate


class TestFactorization:
    def test_identity_split(self):
        v = Dyadic.from_int(2) - pow2(-10)
        a, b = factor_into_operands(v, B16)
        assert a * b == v
        assert b == ONE

    def test_power_split_below_normal_range(self):
        a, b = factor_into_operands(pow2(-23), B16)
        assert a == pow2(-9) and b == pow2(-14)

    def test_too_many_bits(self):
        with pytest.raises(NotFactorable):
            factor_into_operands(ONE + pow2(-11), B16)

    def test_zero(self):
        assert factor_into_operands(ZERO, B16) == (ZERO, ZERO)

    @pytest.mark.parametrize("fin", [B16, BF16, TF32], ids=lambda f: f.name)
    def test_random_values_round_trip(self, fin):
        import random
        rng = random.Random(5)
        for _ in range(300):
            sig = rng.randrange(1, 1 << fin.precision)
            exp = rng.randrange(-30, 8)
            v = Dyadic.make(rng.choice((1, -1)), sig, exp)
            a, b = factor_into_operands(v, fin)
            assert a * b == v
            assert a.bit_count <= fin.precision
            assert b.sig == 1

    def test_unreachable_exponent(self):
        with pytest.raises(NotFactorable):
            factor_into_operands(pow2(-60), B16)


class TestSubnormalProbes:
    def test_supported_model(self):
        probe_in, probe_out = gen_subnormal_probes(B16, B32)
        cfg = BlockFmaConfig()
        assert eval_probe(probe_in, cfg).value is True
        assert eval_probe(probe_out, cfg).value is True

    def test_flushing_input_model(self):
        ftz_in = FpFormat("b16ftz", precision=11, exp_bits=5,
                          storage_bits=16, subnormals=False)
        probe_in, _ = gen_subnormal_probes(ftz_in, B32)
        # A flush-on-read backend sees zero operands.
        verdict = probe_in.classify([ZERO])
        assert verdict.value is False

    def test_flushing_output_model(self):
        _, probe_out = gen_subnormal_probes(B16, B32)
        verdict = probe_out.classify([ZERO])
        assert verdict.value is False

    def test_out_vector_reaches_subnormal_band(self):
        # Narrow-range inputs ride the addend; wide-range use a product.
        _, probe_fp16 = gen_subnormal_probes(B16, B32)
        [vec] = probe_fp16.vectors
        expected = vec.c
        for a, b in vec.pairs:
            expected = expected + a * b
        assert not expected.is_zero
        assert expected.floor_log2 < B32.emin

        _, probe_bf16 = gen_subnormal_probes(BF16, B32)
        [vec] = probe_bf16.vectors
        total = vec.c
        for a, b in vec.pairs:
            total = total + a * b
        assert not total.is_zero
        assert total.floor_log2 < B32.emin


class TestPostAlignmentProbe:
    @pytest.mark.parametrize("n_eab", [0, 1])
    def test_truncating_alignment(self, n_eab):
        probe = gen_post_alignment_rounding_probe(B16, B32, n_eab)
        cfg = BlockFmaConfig(n_eab=n_eab)
        assert eval_probe(probe, cfg).value == "Truncate"

    def test_rounding_alignments(self):
        probe = gen_post_alignment_rounding_probe(B16, B32, 1)
        for policy, name in [(AlignmentPolicy.RNE, "RNE"),
                             (AlignmentPolicy.RU, "RU"),
                             (AlignmentPolicy.RD, "RD")]:
            cfg = BlockFmaConfig(n_eab=1, alignment_policy=policy)
            assert eval_probe(probe, cfg).value == name

    def test_example_values(self):
        probe = gen_post_alignment_rounding_probe(B16, B32, 1)
        [pos, neg] = probe.vectors
        r = pos.pairs[0][0] * pos.pairs[0][1]
        assert r == pow2(-25) + pow2(-26)
        assert pos.c == ONE and neg.c == -ONE
        cfg = BlockFmaConfig(n_eab=1, alignment_policy=AlignmentPolicy.RNE)
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], cfg, B32)
        assert d == ONE + pow2(-23)

    def test_bad_depth(self):
        with pytest.raises(ValueError):
            gen_post_alignment_rounding_probe(B16, B32, 2)


class TestRmBfmaProbe:
    @pytest.mark.parametrize("rm,name", [
        (RM.TRUNCATE, "Truncate"), (RM.RNE, "RNE"),
        (RM.RU, "RU"), (RM.RD, "RD")])
    def test_deferred_modes(self, rm, name):
        probe = gen_rm_bfma_probe(B16, B32)
        cfg = BlockFmaConfig(n_eab=0, rm_intra=rm)
        assert eval_probe(probe, cfg).value == name

    def test_truncate_value(self):
        probe = gen_rm_bfma_probe(B16, B32)
        [pos, _] = probe.vectors
        cfg = BlockFmaConfig(n_eab=0)
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], cfg, B32)
        assert d == Dyadic.from_int(4)

    def test_rne_value(self):
        probe = gen_rm_bfma_probe(B16, B32)
        [pos, _] = probe.vectors
        cfg = BlockFmaConfig(n_eab=0, rm_intra=RM.RNE)
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], cfg, B32)
        assert d == Dyadic.from_int(4) + pow2(-21)

    def test_binary16_output_rne(self):
        probe = gen_rm_bfma_probe(B16, B16)
        cfg = BlockFmaConfig(rm_intra=RM.RNE)
        verdict = eval_probe(probe, cfg, fout=B16)
        assert verdict.value == "RNE"
        [pos, _] = probe.vectors
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], cfg, B16)
        assert d == Dyadic.from_int(4) + pow2(-8)

    def test_alignment_bit_indifference(self):
        probe = gen_rm_bfma_probe(B16, B32)
        for n_eab in (0, 1, 2):
            cfg = BlockFmaConfig(n_eab=n_eab, rm_intra=RM.RNE)
            assert eval_probe(probe, cfg).value == "RNE"


class TestAlignmentProbes:
    def test_ladder_detects_one_bit(self):
        probe = gen_alignment_bits_probe(B16, B32, 1)
        assert eval_probe(probe, BlockFmaConfig(n_eab=1)).value \
            == ("at_least", 1)
        assert eval_probe(probe, BlockFmaConfig(n_eab=0)).value \
            == ("fewer_than", 1)

    def test_ladder_depth_two(self):
        probe = gen_alignment_bits_probe(B16, B32, 2)
        [pos, _] = probe.vectors
        values = [a * b for a, b in pos.pairs]
        assert values[0] == pow2(-24)
        assert values[1] == pow2(-25) and values[2] == pow2(-25)
        assert eval_probe(probe, BlockFmaConfig(n_eab=1)).value \
            == ("fewer_than", 2)
        assert eval_probe(probe, BlockFmaConfig(n_eab=2)).value \
            == ("at_least", 2)

    def test_ladder_one_sided_indicator_reads_fewer(self):
        # Directed block rounding can resurrect the indicator on one
        # polarity; the pair rule must not read that as survival.
        probe = gen_alignment_bits_probe(B16, B32, 2)
        cfg = BlockFmaConfig(n_eab=1, rm_intra=RM.RU)
        assert eval_probe(probe, cfg).value == ("fewer_than", 2)

    def test_cancel_probe_depths(self):
        for true_eab in (0, 1, 2):
            cfg = BlockFmaConfig(n_eab=true_eab, n_ecb=2, fma_width=4)
            for n in (1, 2, 3):
                probe = gen_alignment_cancel_probe(B16, B32, n)
                want = ("at_least", n) if true_eab >= n else ("fewer_than", n)
                assert eval_probe(probe, cfg).value == want, (true_eab, n)

    def test_cancel_probe_rounding_free(self):
        for rm in (RM.TRUNCATE, RM.RNE, RM.RU, RM.RD):
            cfg = BlockFmaConfig(n_eab=2, rm_intra=rm, fma_width=4, n_ecb=2)
            probe = gen_alignment_cancel_probe(B16, B32, 2)
            assert eval_probe(probe, cfg).value == ("at_least", 2)

    def test_cancel_probe_needs_no_addend(self):
        probe = gen_alignment_cancel_probe(B16, B32, 1)
        assert all(v.c.is_zero for v in probe.vectors)
        cfg = BlockFmaConfig(n_eab=1, ordering=Ordering.TREE_THEN_C)
        assert eval_probe(probe, cfg).value == ("at_least", 1)


class TestNormalisationProbe:
    def test_carry_and_align_cases(self):
        probe = gen_normalisation_probe(B16, B32, "carry_and_align", t=3)
        deferred = BlockFmaConfig(n_eab=1, rm_intra=RM.RNE)
        immediate = deferred.with_(norm_policy=NormPolicy.IMMEDIATE)
        assert eval_probe(probe, deferred).value is False
        assert eval_probe(probe, immediate).value is True

    def test_carry_and_align_values(self):
        probe = gen_normalisation_probe(B16, B32, "carry_and_align", t=3)
        [pos, _] = probe.vectors
        deferred = BlockFmaConfig(n_eab=1)
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], deferred, B32)
        assert d == ONE + pow2(-21) + pow2(-23)
        immediate = deferred.with_(norm_policy=NormPolicy.IMMEDIATE,
                                   rm_intra=RM.RNE)
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], immediate, B32)
        assert d == ONE + pow2(-21)

    def test_immediate_directed_modes(self):
        probe = gen_normalisation_probe(B16, B32, "carry_and_align", t=3)
        for rm in (RM.TRUNCATE, RM.RNE, RM.RU, RM.RD):
            cfg = BlockFmaConfig(n_eab=1, rm_intra=rm,
                                 norm_policy=NormPolicy.IMMEDIATE)
            assert eval_probe(probe, cfg).value is True, rm

    def test_carry_only_cases(self):
        probe = gen_normalisation_probe(B16, B32, "carry_only")
        deferred = BlockFmaConfig(n_eab=0)
        immediate = deferred.with_(norm_policy=NormPolicy.IMMEDIATE)
        assert eval_probe(probe, deferred).value is False
        assert eval_probe(probe, immediate).value is True
        [pos, _] = probe.vectors
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], immediate, B32)
        assert d == Dyadic.from_int(2)

    def test_gap_parameter(self):
        probe4 = gen_normalisation_probe(B16, B32, "carry_and_align", t=4)
        deferred = BlockFmaConfig(n_eab=1)
        assert eval_probe(probe4, deferred).value is False
        with pytest.raises(ValueError):
            gen_normalisation_probe(B16, B32, "carry_and_align", t=2)


class TestRmMbfmaProbe:
    @pytest.mark.parametrize("rm,name", [
        (RM.TRUNCATE, "Truncate"), (RM.RNE, "RNE"),
        (RM.RU, "RU"), (RM.RD, "RD")])
    def test_paper_vectors(self, rm, name):
        probe = gen_rm_mbfma_probe(B16, B32, 8, n_eab=1)
        cfg = BlockFmaConfig(rm_inter=rm)
        assert eval_probe(probe, cfg).value == name

    def test_truncate_value(self):
        probe = gen_rm_mbfma_probe(B16, B32, 8, n_eab=1)
        [pos, _] = probe.vectors
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], BlockFmaConfig(), B32)
        assert d == ONE + pow2(-23)

    def test_rne_value(self):
        probe = gen_rm_mbfma_probe(B16, B32, 8, n_eab=1)
        [pos, _] = probe.vectors
        cfg = BlockFmaConfig(rm_inter=RM.RNE)
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], cfg, B32)
        assert d == ONE + pow2(-22)

    def test_binary16_output(self):
        probe = gen_rm_mbfma_probe(B16, B16, 8, n_eab=1)
        cfg = BlockFmaConfig(rm_intra=RM.RNE, rm_inter=RM.RNE)
        assert eval_probe(probe, cfg, fout=B16).value == "RNE"
        [pos, _] = probe.vectors
        d = mma_dot(pos.c, [a for a, _ in pos.pairs],
                    [b for _, b in pos.pairs], cfg, B16)
        assert d == ONE + pow2(-9)

    @pytest.mark.parametrize("rm,name", [
        (RM.TRUNCATE, "Truncate"), (RM.RNE, "RNE"),
        (RM.RU, "RU"), (RM.RD, "RD")])
    def test_carry_variant_no_alignment_bits(self, rm, name):
        probe = gen_rm_mbfma_probe(B16, B32, 4, n_eab=0)
        cfg = BlockFmaConfig(fma_width=4, n_eab=0, n_ecb=2, rm_inter=rm)
        assert eval_probe(probe, cfg).value == name

    def test_carry_variant_intra_insensitive(self):
        probe = gen_rm_mbfma_probe(B16, B32, 4, n_eab=0)
        for intra in (RM.TRUNCATE, RM.RNE, RM.RU, RM.RD):
            cfg = BlockFmaConfig(fma_width=4, n_eab=0, n_ecb=2,
                                 rm_intra=intra, rm_inter=RM.RNE)
            assert eval_probe(probe, cfg).value == "RNE"

    def test_live_position_for_last_anchored(self):
        probe = gen_rm_mbfma_probe(B16, B32, 8, n_eab=1, live_position=1)
        cfg = BlockFmaConfig(ordering=Ordering.C_WITH_LAST, rm_inter=RM.RNE)
        assert eval_probe(probe, cfg).value == "RNE"


class TestOrderingProbe:
    @pytest.mark.parametrize("ordering,name", [
        (Ordering.C_FIRST, "CFirst"),
        (Ordering.TREE_THEN_C, "TreeThenC"),
        (Ordering.C_WITH_LAST, "CWithLast")])
    def test_assignment_rotation(self, ordering, name):
        probe = gen_ordering_probe(B16, B32, 8)
        cfg = BlockFmaConfig(ordering=ordering)
        assert eval_probe(probe, cfg).value == name

    def test_survivor_value(self):
        probe = gen_ordering_probe(B16, B32, 8)
        v1 = probe.vectors[0]
        d = mma_dot(v1.c, [a for a, _ in v1.pairs],
                    [b for _, b in v1.pairs], BlockFmaConfig(), B32)
        assert d == pow2(-27)

    def test_rounding_mode_indifference(self):
        for rm in (RM.TRUNCATE, RM.RNE, RM.RU, RM.RD):
            probe = gen_ordering_probe(B16, B32, 4)
            cfg = BlockFmaConfig(fma_width=4, n_ecb=2,
                                 ordering=Ordering.TREE_THEN_C,
                                 rm_intra=rm, rm_inter=rm)
            assert eval_probe(probe, cfg).value == "TreeThenC"


class TestScaleCovariance:
    """The same verdicts must come back at shifted scale exponents."""

    @pytest.mark.parametrize("j", [0, 1, 8])
    def test_rm_bfma(self, j):
        probe = gen_rm_bfma_probe(B16, B32, j=j)
        assert eval_probe(probe, BlockFmaConfig(rm_intra=RM.RNE)).value \
            == "RNE"

    @pytest.mark.parametrize("j", [0, 1, 8])
    def test_post_alignment(self, j):
        probe = gen_post_alignment_rounding_probe(B16, B32, 1, j=j)
        assert eval_probe(probe, BlockFmaConfig(n_eab=1)).value == "Truncate"

    @pytest.mark.parametrize("j", [0, 1, 8])
    def test_alignment_ladder(self, j):
        probe = gen_alignment_bits_probe(B16, B32, 1, j=j)
        assert eval_probe(probe, BlockFmaConfig(n_eab=1)).value \
            == ("at_least", 1)

    @pytest.mark.parametrize("j", [0, 1, 8])
    def test_ordering(self, j):
        probe = gen_ordering_probe(B16, B32, 8, j=j)
        assert eval_probe(probe, BlockFmaConfig()).value == "CFirst"

    @pytest.mark.parametrize("j", [0, 1, 8])
    def test_rm_mbfma(self, j):
        probe = gen_rm_mbfma_probe(B16, B32, 8, j=j, n_eab=1)
        assert eval_probe(probe, BlockFmaConfig(rm_inter=RM.RD)).value == "RD"


class TestOperandDiscipline:
    """Every generated operand is exact in the input format."""

    def probes_for(self, fin, fout):
        yield from gen_subnormal_probes(fin, fout)
        yield gen_post_alignment_rounding_probe(fin, fout, 1)
        yield gen_rm_bfma_probe(fin, fout)
        yield gen_alignment_bits_probe(fin, fout, 2)
        yield gen_alignment_cancel_probe(fin, fout, 2)
        yield gen_normalisation_probe(fin, fout, "carry_and_align")
        yield gen_normalisation_probe(fin, fout, "carry_only")
        yield gen_rm_mbfma_probe(fin, fout, 8, n_eab=1)
        yield gen_rm_mbfma_probe(fin, fout, 8, n_eab=0)
        yield gen_ordering_probe(fin, fout, 8)

    @pytest.mark.parametrize("fin", [B16, BF16, TF32], ids=lambda f: f.name)
    def test_operands_encode_losslessly(self, fin):
        from mmaprobe.formats import decode, encode

        for probe in self.probes_for(fin, B32):
            for vec in probe.vectors:
                for a, b in vec.pairs:
                    for v in (a, b):
                        bits, flags = encode(v, fin)
                        assert not flags.inexact, (probe.feature, vec.label, v)
                        assert decode(bits, fin) == v
                c_bits, c_flags = encode(vec.c, B32)
                assert not c_flags.inexact
                assert decode(c_bits, B32) == vec.c


class TestWidthSearch:
    def run(self, cfg, fin=B16, fout=B32, k_max=64, extended=True):
        k_max = min(k_max, cfg.max_k)
        return run_algorithm1(sim_eval(cfg, fout), fin, fout, k_max,
                              extended=extended)

    def test_eight_wide_three_carry_bits(self):
        res = self.run(BlockFmaConfig(fma_width=8, n_eab=1, n_ecb=3))
        assert (res.n_fma, res.n_ecb) == (8, 3)

    def test_four_wide_tensorfloat(self):
        cfg = BlockFmaConfig(fma_width=4, n_eab=1, n_ecb=2)
        res = self.run(cfg, fin=TF32)
        assert (res.n_fma, res.n_ecb) == (4, 2)

    def test_width_one(self):
        res = self.run(BlockFmaConfig(fma_width=1, n_eab=1, n_ecb=0))
        assert (res.n_fma, res.n_ecb) == (1, 0)

    def test_no_alignment_bits(self):
        res = self.run(BlockFmaConfig(fma_width=4, n_eab=0, n_ecb=2))
        assert (res.n_fma, res.n_ecb) == (4, 2)

    def test_published_loop_head_pair_only(self):
        res = self.run(BlockFmaConfig(fma_width=8, n_eab=1, n_ecb=3),
                       extended=False)
        assert (res.n_fma, res.n_ecb) == (8, 3)
        assert all("head" in l for l in res.mismatch_labels)

    def test_bfloat_carry_bits(self):
        res = self.run(BlockFmaConfig(fma_width=8, n_eab=1, n_ecb=3),
                       fin=BF16)
        assert (res.n_fma, res.n_ecb) == (8, 3)

    def test_inconclusive_at_cap(self):
        cfg = BlockFmaConfig(fma_width=8, n_eab=1, n_ecb=3)
        res = run_algorithm1(sim_eval(cfg), B16, B32, 6, extended=True)
        assert not res.conclusive and res.n_fma is None
        assert res.n_ecb == 3  # matched carries up to the cap

    def test_carry_vector_shape(self):
        vec = carry_test_vector(8, B16, B32)
        total = carry_test_expected(vec)
        # The exact sum fits the output precision: equality is achievable.
        assert total.bit_count <= 24
        values = [a * b for a, b in vec.pairs]
        big = Dyadic.from_int(2) - pow2(-10)
        assert values[:7] == [big] * 7
        assert values[7] == pow2(-23)

    def test_mixed_mode_pairs_still_break(self):
        # Opposing directed modes cancel errors on the plain vectors;
        # the cancel variants must still expose the boundary.
        for intra, inter in [(RM.RD, RM.RU), (RM.RU, RM.RD),
                             (RM.RU, RM.TRUNCATE), (RM.RNE, RM.RU)]:
            for ordering in Ordering:
                cfg = BlockFmaConfig(fma_width=4, n_eab=1, n_ecb=2,
                                     rm_intra=intra, rm_inter=inter,
                                     ordering=ordering)
                res = self.run(cfg)
                assert res.conclusive and res.n_fma == 4, (intra, inter,
                                                           ordering)

    def test_match_at_all_smaller_k(self):
        # No vector family may split before the true boundary.
        for ordering in Ordering:
            for intra in (RM.TRUNCATE, RM.RNE, RM.RU, RM.RD):
                cfg = BlockFmaConfig(fma_width=8, n_eab=0, n_ecb=3,
                                     rm_intra=intra, ordering=ordering)
                res = self.run(cfg)
                assert res.conclusive and res.n_fma == 8, (ordering, intra)

    def test_width_vectors_exact_sums(self):
        for k in (2, 4, 7):
            for vec in width_test_vectors(k, B16, B32):
                total = width_test_expected(vec)
                assert total.bit_count <= 24
