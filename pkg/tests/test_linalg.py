import numpy as np
import pytest

from elastiq.linalg import (
    svd_full,
    spectral_norm,
    tucker2_fit,
    tucker2_recompose,
    cp_fit,
    cp_recompose,
    spectral_gap_penalty,
)

from oracles import jacobi_gram_eigvals


def _rand(m, n, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((m, n))


class TestSvdFull:
    def test_matches_independent_jacobi_gram_oracle(self):
        # singular values squared must equal the Gram eigenvalues produced
        # by a separately written largest-pivot Jacobi eigensolver
        for seed, (m, n) in [(0, (8, 8)), (1, (12, 7)), (2, (6, 13)), (3, (20, 20))]:
            w = _rand(m, n, seed)
            f = svd_full(w)
            evals = jacobi_gram_eigvals(w if m >= n else w.T)
            assert np.allclose(f.sigma**2, np.maximum(evals, 0.0), atol=1e-9 * max(1.0, evals[0]))

    def test_matches_numpy_reference(self):
        for seed in range(6):
            w = _rand(11, 9, seed + 10)
            f = svd_full(w)
            ref = np.linalg.svd(w, compute_uv=False)
            assert np.allclose(f.sigma, ref, rtol=1e-10, atol=1e-12)

    def test_orthonormal_factors_and_reconstruction(self):
        for seed, (m, n) in [(0, (16, 12)), (1, (12, 16)), (2, (9, 9))]:
            w = _rand(m, n, seed + 20)
            f = svd_full(w)
            r = min(m, n)
            assert f.u.shape == (m, r) and f.v.shape == (n, r)
            assert np.allclose(f.u.T @ f.u, np.eye(r), atol=1e-8)
            assert np.allclose(f.v.T @ f.v, np.eye(r), atol=1e-8)
            recon = f.u @ np.diag(f.sigma) @ f.v.T
            assert np.linalg.norm(recon - w) <= 1e-8 * np.linalg.norm(w)

    def test_sigma_descending_nonnegative(self):
        w = _rand(10, 14, 31)
        f = svd_full(w)
        assert np.all(f.sigma >= 0)
        assert np.all(np.diff(f.sigma) <= 1e-12)

    def test_identity(self):
        f = svd_full(np.eye(8))
        assert np.allclose(f.sigma, np.ones(8), atol=1e-12)

    def test_diagonal(self):
        f = svd_full(np.diag([3.0, 2.0, 1.0]))
        assert np.allclose(f.sigma, [3.0, 2.0, 1.0], atol=1e-12)

    def test_zero_matrix(self):
        f = svd_full(np.zeros((5, 4)))
        assert np.allclose(f.sigma, 0.0)
        assert np.allclose(f.u.T @ f.u, np.eye(4), atol=1e-10)
        assert np.allclose(f.v.T @ f.v, np.eye(4), atol=1e-10)

    def test_rank_deficient_gets_orthonormal_completion(self):
        rng = np.random.Generator(np.random.PCG64(5))
        a = rng.standard_normal((8, 3))
        b = rng.standard_normal((3, 8))
        w = a @ b
        f = svd_full(w)
        assert np.all(f.sigma[3:] <= 1e-10 * f.sigma[0])
        assert np.allclose(f.u.T @ f.u, np.eye(8), atol=1e-8)
        recon = f.u @ np.diag(f.sigma) @ f.v.T
        assert np.linalg.norm(recon - w) <= 1e-8 * np.linalg.norm(w)

    def test_transpose_invariance(self):
        w = _rand(13, 6, 77)
        assert np.allclose(svd_full(w).sigma, svd_full(w.T).sigma, rtol=1e-12, atol=1e-12)

    def test_eckart_young_small(self):
        w = _rand(10, 8, 42)
        f = svd_full(w)
        for k in range(1, 8):
            wk = f.u[:, :k] @ np.diag(f.sigma[:k]) @ f.v[:, :k].T
            resid = np.linalg.svd(w - wk, compute_uv=False)[0]
            target = f.sigma[k] if k < 8 else 0.0
            assert abs(resid - target) <= 1e-9 * max(1.0, f.sigma[0])

    def test_deterministic(self):
        w = _rand(9, 9, 3)
        f1 = svd_full(w)
        f2 = svd_full(w)
        assert np.array_equal(f1.u, f2.u)
        assert np.array_equal(f1.sigma, f2.sigma)
        assert np.array_equal(f1.v, f2.v)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            svd_full(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            svd_full(np.zeros(4))
        with pytest.raises(ValueError):
            svd_full(np.array([[1.0, np.nan], [0.0, 1.0]]))


class TestSpectralNorm:
    def test_matches_svd_oracle(self):
        for seed in range(8):
            w = _rand(12, 10, seed + 50)
            got = spectral_norm(w, seed=0, tol=1e-12, max_iters=500)
            want = svd_full(w).sigma[0]
            assert abs(got - want) <= 1e-6 * want

    def test_hand_computed_column(self):
        # [[3],[4]] stacked with a zero column: largest singular value 5
        w = np.array([[3.0, 0.0], [4.0, 0.0]])
        assert abs(spectral_norm(w) - 5.0) <= 1e-9

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((4, 4))) == 0.0

    def test_deterministic_for_fixed_seed(self):
        w = _rand(10, 10, 8)
        assert spectral_norm(w, seed=3) == spectral_norm(w, seed=3)

    def test_never_exceeds_true_norm(self):
        # power iteration approaches the top singular value from below
        for seed in range(5):
            w = _rand(9, 9, seed + 70)
            got = spectral_norm(w, seed=1, tol=1e-9, max_iters=200)
            want = np.linalg.svd(w, compute_uv=False)[0]
            assert got <= want * (1.0 + 1e-9)


class TestTucker2:
    def test_planted_rank11_recovery(self):
        rng = np.random.Generator(np.random.PCG64(11))
        uo = rng.standard_normal(6)
        ui = rng.standard_normal(5)
        spatial = rng.standard_normal((3, 3))
        w4 = np.einsum("o,i,hw->oihw", uo, ui, spatial)
        f = tucker2_fit(w4, 1, 1, sweeps=2)
        recon = tucker2_recompose(f)
        assert np.linalg.norm(recon - w4) <= 1e-8 * np.linalg.norm(w4)

    def test_full_rank_exact(self):
        rng = np.random.Generator(np.random.PCG64(12))
        w4 = rng.standard_normal((4, 3, 3, 3))
        f = tucker2_fit(w4, 4, 3, sweeps=1)
        recon = tucker2_recompose(f)
        assert np.linalg.norm(recon - w4) <= 1e-8 * np.linalg.norm(w4)

    def test_orthonormal_factors(self):
        rng = np.random.Generator(np.random.PCG64(13))
        w4 = rng.standard_normal((6, 5, 3, 3))
        f = tucker2_fit(w4, 3, 2, sweeps=3)
        assert np.allclose(f.u_out.T @ f.u_out, np.eye(3), atol=1e-8)
        assert np.allclose(f.u_in.T @ f.u_in, np.eye(2), atol=1e-8)

    def test_error_monotone_in_sweeps(self):
        rng = np.random.Generator(np.random.PCG64(14))
        w4 = rng.standard_normal((6, 5, 3, 3))
        errs = []
        for sweeps in range(5):
            f = tucker2_fit(w4, 3, 2, sweeps=sweeps)
            errs.append(np.linalg.norm(tucker2_recompose(f) - w4))
        for a, b in zip(errs, errs[1:]):
            assert b <= a + 1e-10

    def test_rank_validation(self):
        w4 = np.zeros((4, 3, 3, 3))
        w4[0, 0, 0, 0] = 1.0
        with pytest.raises(ValueError):
            tucker2_fit(w4, 5, 1)
        with pytest.raises(ValueError):
            tucker2_fit(w4, 1, 0)


class TestCp:
    def test_rank1_exact(self):
        rng = np.random.Generator(np.random.PCG64(21))
        w = np.outer(rng.standard_normal(7), rng.standard_normal(5))
        f = cp_fit(w, 1, sweeps=3)
        assert np.linalg.norm(cp_recompose(f) - w) <= 1e-8 * np.linalg.norm(w)

    def test_full_rank_matches_svd_error(self):
        w = _rand(6, 4, 22)
        f = cp_fit(w, 4, sweeps=3)
        err_cp = np.linalg.norm(cp_recompose(f) - w)
        sv = svd_full(w)
        err_svd = np.linalg.norm(sv.u @ np.diag(sv.sigma) @ sv.v.T - w)
        assert abs(err_cp - err_svd) <= 1e-6 * max(1.0, np.linalg.norm(w))

    def test_unit_columns_and_descending_weights(self):
        w = _rand(8, 6, 23)
        f = cp_fit(w, 3, sweeps=4)
        assert np.allclose(np.linalg.norm(f.a1, axis=0), 1.0, atol=1e-10)
        assert np.allclose(np.linalg.norm(f.a2, axis=0), 1.0, atol=1e-10)
        assert np.all(np.diff(f.weights) <= 1e-12)
        assert np.all(f.weights >= 0)

    def test_error_monotone_in_sweeps(self):
        w = _rand(9, 7, 24)
        errs = []
        for sweeps in range(5):
            f = cp_fit(w, 3, sweeps=sweeps)
            errs.append(np.linalg.norm(cp_recompose(f) - w))
        for a, b in zip(errs, errs[1:]):
            assert b <= a + 1e-10


class TestGapPenalty:
    def test_two_value_example(self):
        assert spectral_gap_penalty(np.array([5.0, 1.0]), 0.5) == pytest.approx(3.5)

    def test_gaps_at_delta_are_free(self):
        assert spectral_gap_penalty(np.array([2.0, 1.0, 0.0]), 1.0) == 0.0

    def test_single_value(self):
        assert spectral_gap_penalty(np.array([4.0]), 0.1) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            spectral_gap_penalty(np.array([1.0, 2.0]), 0.5)
        with pytest.raises(ValueError):
            spectral_gap_penalty(np.array([2.0, 1.0]), -0.1)
        with pytest.raises(ValueError):
            spectral_gap_penalty(np.array([]), 0.5)
