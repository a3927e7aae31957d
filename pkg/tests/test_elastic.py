"""Elastic layer behavior: truncation, residual norms, masks, bit maps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastiq import elastic, linalg


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def _independent_round_trip(t, bits):
    # deliberately separate from the package quantizer: max-range symmetric
    # grid, round-half-to-even, clip
    g = 2 ** (bits - 1) - 1
    s = np.max(np.abs(t)) / g
    if s == 0.0:
        s = 1.0
    return np.clip(np.rint(t / s), -g, g) * s


class TestElasticLayerType:
    def test_from_dense_builds_full_range(self):
        w = _rng(0).standard_normal((7, 5))
        layer = elastic.from_dense(w)
        assert layer.kind == elastic.DENSE_SVD
        assert (layer.k_min, layer.k_max) == (1, 5)
        assert layer.out_features == 7
        assert layer.in_features == 5

    def test_kind_factor_mismatch_rejected(self):
        w = _rng(1).standard_normal((4, 4))
        f = linalg.svd_full(w)
        with pytest.raises(TypeError):
            elastic.ElasticLayer(elastic.DENSE_CP, f, 1, 4)

    def test_unknown_kind_rejected(self):
        f = linalg.svd_full(np.eye(3))
        with pytest.raises(ValueError, match="unknown layer kind"):
            elastic.ElasticLayer("dense", f, 1, 3)

    def test_rank_bounds_validated(self):
        f = linalg.svd_full(_rng(2).standard_normal((5, 4)))
        with pytest.raises(ValueError):
            elastic.ElasticLayer(elastic.DENSE_SVD, f, 0, 4)
        with pytest.raises(ValueError):
            elastic.ElasticLayer(elastic.DENSE_SVD, f, 1, 5)
        with pytest.raises(ValueError):
            elastic.ElasticLayer(elastic.DENSE_SVD, f, 3, 2)

    def test_bias_shape_validated(self):
        w = _rng(3).standard_normal((6, 4))
        layer = elastic.from_dense(w, bias=np.ones(6))
        assert layer.bias.shape == (6,)
        with pytest.raises(ValueError, match="bias"):
            elastic.from_dense(w, bias=np.ones(4))


class TestTruncate:
    def test_full_rank_is_bit_exact(self):
        w = _rng(10).standard_normal((8, 6))
        layer = elastic.from_dense(w)
        f = layer.factors
        expected = (f.u * f.sigma) @ f.v.T
        assert np.array_equal(elastic.truncate(layer, layer.k_max), expected)

    def test_diagonal_rank_one(self):
        layer = elastic.from_dense(np.diag([5.0, 3.0, 1.0]))
        got = elastic.truncate(layer, 1)
        assert np.array_equal(got, np.diag([5.0, 0.0, 0.0]))

    def test_spectral_error_matches_next_singular(self):
        w = _rng(11).standard_normal((9, 6))
        layer = elastic.from_dense(w)
        full = elastic.truncate(layer, layer.k_max)
        err = np.linalg.norm(full - elastic.truncate(layer, 2), 2)
        assert err == pytest.approx(layer.factors.sigma[2], rel=1e-7)

    def test_out_of_range_rejected(self):
        layer = elastic.from_dense(_rng(12).standard_normal((5, 5)), k_min=2)
        for bad in (0, 1, 6):
            with pytest.raises(ValueError, match="outside"):
                elastic.truncate(layer, bad)

    def test_conv_full_rank_bit_exact(self):
        kernel = _rng(13).standard_normal((4, 3, 3, 3))
        layer = elastic.from_conv(kernel)
        got = elastic.truncate(layer, layer.k_max)
        assert np.array_equal(got, linalg.tucker2_recompose(layer.factors))
        assert np.allclose(got, kernel, atol=1e-8)

    def test_conv_schedule_hand_values(self):
        kernel = _rng(14).standard_normal((6, 4, 3, 3))
        layer = elastic.from_conv(kernel)
        assert layer.k_max == 6
        sched = [elastic.conv_rank_schedule(layer, k) for k in range(1, 7)]
        assert sched == [(1, 1), (2, 2), (3, 2), (4, 3), (5, 4), (6, 4)]
        for (a_o, a_i), (b_o, b_i) in zip(sched, sched[1:]):
            assert b_o >= a_o and b_i >= a_i

    def test_cp_rank_one_exact(self):
        a = _rng(15).standard_normal(6)
        b = _rng(16).standard_normal(4)
        layer = elastic.from_dense_cp(np.outer(a, b), rank=1)
        assert np.allclose(elastic.truncate(layer, 1), np.outer(a, b),
                           atol=1e-10)

    def test_cp_full_rank_bit_exact(self):
        w = _rng(17).standard_normal((5, 4))
        layer = elastic.from_dense_cp(w, rank=4)
        f = layer.factors
        expected = (f.a1 * f.weights) @ f.a2.T
        assert np.array_equal(elastic.truncate(layer, 4), expected)


class TestResidualNorm:
    def test_full_rank_is_zero(self):
        layer = elastic.from_dense(_rng(20).standard_normal((6, 6)))
        assert elastic.residual_norm(layer, layer.k_max) == 0.0

    def test_diagonal_tail_value(self):
        layer = elastic.from_dense(np.diag([5.0, 3.0, 1.0]))
        assert elastic.residual_norm(layer, 2) == 1.0

    def test_matches_stored_spectrum(self):
        layer = elastic.from_dense(_rng(21).standard_normal((8, 7)))
        for k in range(1, 7):
            assert elastic.residual_norm(layer, k) == float(
                layer.factors.sigma[k])

    def test_quantized_matches_explicit_oracle(self):
        w = _rng(22).standard_normal((8, 8))
        layer = elastic.from_dense(w)
        k, q = 4, 8
        got = elastic.residual_norm(layer, k, q)

        f = layer.factors
        full = f.u @ np.diag(f.sigma) @ f.v.T
        approx = (_independent_round_trip(f.u[:, :k], q)
                  @ np.diag(_independent_round_trip(f.sigma[:k], q))
                  @ _independent_round_trip(f.v[:, :k], q).T)
        want = np.linalg.norm(full - approx, 2)
        assert got == pytest.approx(want, rel=1e-6)

    def test_quantized_triple_widths(self):
        layer = elastic.from_dense(_rng(23).standard_normal((7, 5)))
        k, widths = 3, (6, 5, 6)
        got = elastic.residual_norm(layer, k, widths)
        f = layer.factors
        full = f.u @ np.diag(f.sigma) @ f.v.T
        approx = (_independent_round_trip(f.u[:, :k], 6)
                  @ np.diag(_independent_round_trip(f.sigma[:k], 5))
                  @ _independent_round_trip(f.v[:, :k], 6).T)
        want = np.linalg.norm(full - approx, 2)
        assert got == pytest.approx(want, rel=1e-6)

    def test_conv_quantized_matches_unfolded_oracle(self):
        kernel = _rng(24).standard_normal((5, 4, 3, 3))
        layer = elastic.from_conv(kernel)
        k, q = 3, 6
        got = elastic.residual_norm(layer, k, q)

        f = layer.factors
        r_o, r_i = elastic.conv_rank_schedule(layer, k)
        approx = np.einsum(
            "rshw,or,is->oihw",
            _independent_round_trip(f.core[:r_o, :r_i], q),
            _independent_round_trip(f.u_out[:, :r_o], q),
            _independent_round_trip(f.u_in[:, :r_i], q))
        resid = linalg.tucker2_recompose(f) - approx
        want = np.linalg.norm(resid.reshape(resid.shape[0], -1), 2)
        assert got == pytest.approx(want, rel=1e-6)

    def test_monotone_in_rank_unquantized(self):
        for seed in range(5):
            layer = elastic.from_dense(_rng(30 + seed).standard_normal((9, 7)))
            vals = [elastic.residual_norm(layer, k)
                    for k in range(1, layer.k_max + 1)]
            assert all(a >= b for a, b in zip(vals, vals[1:]))
            assert vals[-1] == 0.0

    def test_conv_and_cp_fixtures_monotone(self):
        conv = elastic.from_conv(_rng(40).standard_normal((6, 5, 3, 3)))
        vals = [elastic.residual_norm(conv, k)
                for k in range(1, conv.k_max + 1)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
        assert vals[-1] <= 1e-10

        cp = elastic.from_dense_cp(_rng(41).standard_normal((6, 5)), rank=5)
        vals = [elastic.residual_norm(cp, k) for k in range(1, 6)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
        assert vals[-1] <= 1e-10

    def test_bad_width_rejected(self):
        layer = elastic.from_dense(np.eye(4))
        with pytest.raises(ValueError):
            elastic.residual_norm(layer, 2, 1)


class TestSoftMask:
    def test_sharp_temperature_hits_hard_indicator(self):
        logits = np.arange(80.0, 0.0, -10.0)
        mask = elastic.RankMask(logits=logits, temperature=0.001)
        noise = elastic.sample_gumbel(8, _rng(50))
        got = elastic.soft_mask(mask, noise, k_target=3)
        assert np.max(np.abs(got - elastic.hard_mask(3, 8))) < 1e-3

    def test_high_temperature_flattens(self):
        logits = _rng(51).standard_normal(10)
        mask = elastic.RankMask(logits=logits, temperature=1e6)
        got = elastic.soft_mask(mask, np.zeros(10), k_target=4)
        assert np.ptp(got) < 1e-3
        assert np.max(np.abs(got - 0.5)) < 1e-3

    def test_halving_temperature_contracts_toward_hard(self):
        logits = _rng(52).standard_normal(12)
        noise = elastic.sample_gumbel(12, _rng(53))
        g = logits + noise
        target = np.zeros(12)
        target[np.argsort(-g)[:5]] = 1.0
        dists = []
        for tau in (2.0, 1.0, 0.5):
            mask = elastic.RankMask(logits=logits, temperature=tau)
            got = elastic.soft_mask(mask, noise, k_target=5)
            assert np.all(got >= 0.0) and np.all(got <= 1.0)
            dists.append(np.abs(got - target))
        assert np.all(dists[1] <= dists[0])
        assert np.all(dists[2] <= dists[1])

    def test_deterministic_given_noise(self):
        mask = elastic.RankMask(logits=np.linspace(3, -3, 7), temperature=0.7)
        noise = elastic.sample_gumbel(7, _rng(54))
        a = elastic.soft_mask(mask, noise, k_target=2)
        b = elastic.soft_mask(mask, noise, k_target=2)
        assert np.array_equal(a, b)

    def test_full_rank_target_saturates_to_ones(self):
        mask = elastic.RankMask(logits=_rng(55).standard_normal(6),
                                temperature=0.01)
        got = elastic.soft_mask(mask, np.zeros(6), k_target=6)
        assert np.all(got >= 1.0 - 1e-3)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError, match="temperature"):
            elastic.RankMask(logits=np.ones(4), temperature=0.0)
        mask = elastic.RankMask(logits=np.ones(4), temperature=1.0)
        mask.temperature = -1.0
        with pytest.raises(ValueError, match="temperature"):
            elastic.soft_mask(mask, np.zeros(4), k_target=2)

    def test_shape_and_target_validated(self):
        mask = elastic.RankMask(logits=np.ones(4), temperature=1.0)
        with pytest.raises(ValueError, match="shape"):
            elastic.soft_mask(mask, np.zeros(5), k_target=2)
        for bad in (0, 5):
            with pytest.raises(ValueError, match="k_target"):
                elastic.soft_mask(mask, np.zeros(4), k_target=bad)

    def test_hard_mask_indicator(self):
        assert np.array_equal(elastic.hard_mask(3, 5),
                              [1.0, 1.0, 1.0, 0.0, 0.0])
        assert np.array_equal(elastic.hard_mask(0, 3), np.zeros(3))
        mask = elastic.RankMask(logits=np.zeros(5), temperature=1.0,
                                mode=elastic.HARD, hard_k=2)
        assert np.array_equal(elastic.mask_values(mask),
                              [1.0, 1.0, 0.0, 0.0, 0.0])

    def test_masked_weight_matches_truncate_in_limit(self):
        w = _rng(56).standard_normal((6, 5))
        layer = elastic.from_dense(w)
        logits = np.linspace(5.0, 1.0, 5)
        mask = elastic.RankMask(logits=logits, temperature=1e-4)
        values = elastic.soft_mask(mask, np.zeros(5), k_target=3)
        soft_w = elastic.masked_weight(layer, values)
        assert np.allclose(soft_w, elastic.truncate(layer, 3), atol=1e-8)

    def test_masked_weight_all_ones_is_full(self):
        layer = elastic.from_dense(_rng(57).standard_normal((5, 5)))
        got = elastic.masked_weight(layer, np.ones(5))
        assert np.array_equal(got, elastic.truncate(layer, 5))

    def test_masked_weight_conv_rejected(self):
        layer = elastic.from_conv(_rng(58).standard_normal((4, 3, 3, 3)))
        with pytest.raises(ValueError, match="conv"):
            elastic.masked_weight(layer, np.ones(layer.k_max))


class TestAnnealTemperature:
    def test_start_value(self):
        assert elastic.anneal_temperature(0, 100) == 2.0

    def test_one_period_value(self):
        assert elastic.anneal_temperature(100, 100) == 1.0

    def test_floor(self):
        assert elastic.anneal_temperature(10_000, 100) == 0.3

    def test_monotone_non_increasing(self):
        vals = [elastic.anneal_temperature(t, 50) for t in range(0, 400, 7)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            elastic.anneal_temperature(0, 100, tau0=0.2, tau_min=0.3)
        with pytest.raises(ValueError):
            elastic.anneal_temperature(0, 100, tau_min=0.0)
        with pytest.raises(ValueError):
            elastic.anneal_temperature(0, 100, alpha=1.0)
        with pytest.raises(ValueError):
            elastic.anneal_temperature(0, 0)
        with pytest.raises(ValueError):
            elastic.anneal_temperature(-1, 100)


class TestBitOfRank:
    def test_constant_map(self):
        bm = elastic.BitMap(a=0.0, b=8.0, q_max=8, offsets=(0, 0, 0))
        for k in (1, 2, 7, 64):
            assert elastic.bit_of_rank(bm, k, elastic.FACTOR_CORE) == 8

    def test_log_map_hand_values(self):
        bm = elastic.BitMap(a=1.0, b=4.0, q_max=8)
        assert elastic.base_bits(bm, 1) == 4
        assert elastic.base_bits(bm, 54) == 7
        assert elastic.base_bits(bm, 55) == 8

    def test_offsets_clamp_at_q_max(self):
        bm = elastic.BitMap(a=0.0, b=8.0, q_max=8)
        assert elastic.factor_bits(bm, 3) == (8, 8, 8)

    def test_lower_clamp(self):
        bm = elastic.BitMap(a=0.0, b=0.0, q_max=8)
        assert elastic.bit_of_rank(bm, 5, elastic.FACTOR_U) == 2
        assert elastic.bit_of_rank(bm, 5, elastic.FACTOR_CORE) == 2

    def test_validation(self):
        bm = elastic.BitMap(a=1.0, b=4.0, q_max=8)
        with pytest.raises(ValueError, match="factor"):
            elastic.bit_of_rank(bm, 3, "w")
        with pytest.raises(ValueError):
            elastic.bit_of_rank(bm, 0, elastic.FACTOR_U)
        with pytest.raises(ValueError, match="slope"):
            elastic.BitMap(a=-0.5, b=4.0, q_max=8)
        with pytest.raises(ValueError, match="q_max"):
            elastic.BitMap(a=0.0, b=4.0, q_max=1)

    @given(
        a=st.floats(min_value=0.0, max_value=4.0),
        b=st.floats(min_value=-3.0, max_value=10.0),
        q_max=st.integers(min_value=2, max_value=16),
        off=st.tuples(st.integers(-2, 2), st.integers(-2, 2),
                      st.integers(-2, 2)),
    )
    @settings(deadline=None, max_examples=200)
    def test_monotone_for_random_admissible_maps(self, a, b, q_max, off):
        bm = elastic.BitMap(a=a, b=b, q_max=q_max, offsets=off)
        for factor in (elastic.FACTOR_U, elastic.FACTOR_CORE,
                       elastic.FACTOR_V):
            qs = [elastic.bit_of_rank(bm, k, factor) for k in range(1, 41)]
            assert all(q1 <= q2 for q1, q2 in zip(qs, qs[1:]))
            assert all(2 <= q <= q_max for q in qs)


class TestTiedGroups:
    def test_same_rank_fraction_across_group(self):
        w1 = _rng(60).standard_normal((8, 6))
        w2 = _rng(61).standard_normal((7, 6))
        a = elastic.from_dense(w1, k_max=6, group_id="attn0")
        b = elastic.from_dense(w2, k_max=6, group_id="attn0")
        assert a.group_id == b.group_id == "attn0"
        for k in range(1, 7):
            elastic.truncate(a, k), elastic.truncate(b, k)
            assert elastic.rank_fraction(a, k) == elastic.rank_fraction(b, k)
