import numpy as np
import pytest

from svp_tta import linalg
from svp_tta.errors import (
    ContractViolation,
    NotPositiveDefiniteError,
    SvdConvergenceError,
)
from svp_tta.linalg import RandomStream, cholesky, sample_mvn, svd


def nuclear_norm_oracle(m):
    """Independent route: trace of sqrt of the Gram matrix via symmetric
    eigendecomposition.  The Gram matrix of the smaller side avoids the
    accuracy loss of squaring into a rank-deficient matrix."""
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    eigs = np.linalg.eigvalsh(gram)
    return np.sqrt(np.clip(eigs, 0.0, None)).sum()


def sigma_oracle(m):
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    eigs = np.linalg.eigvalsh(gram)
    return np.sort(np.sqrt(np.clip(eigs, 0.0, None)))[::-1]


class TestSvd:
    def test_identity(self):
        res = svd(np.eye(3))
        assert np.allclose(res.sigma, [1.0, 1.0, 1.0])

    def test_diagonal_magnitudes(self):
        res = svd(np.diag([3.0, -2.0]))
        assert np.allclose(res.sigma, [3.0, 2.0])
        recon = res.u @ np.diag(res.sigma) @ res.v.T
        assert np.allclose(recon, np.diag([3.0, -2.0]), atol=1e-12)

    def test_tall_random_matches_gram_eigensolver(self):
        rng = np.random.default_rng(42)
        m = rng.standard_normal((200, 10))
        res = svd(m)
        expected = sigma_oracle(m)
        assert np.abs(res.sigma - expected).max() <= 1e-8 * expected[0]

    def test_shapes_properties(self):
        # reconstruction, orthonormality, ordering over 100 random shapes
        rng = np.random.default_rng(7)
        for _ in range(100):
            rows = int(rng.integers(2, 201))
            cols = int(rng.integers(2, 65))
            m = rng.standard_normal((rows, cols)) * np.exp(rng.uniform(-2, 2))
            res = svd(m)
            n = min(rows, cols)
            assert res.sigma.shape == (n,)
            assert res.u.shape == (rows, n)
            assert res.v.shape == (cols, n)
            assert (np.diff(res.sigma) <= 1e-15).all()
            assert (res.sigma >= 0).all()
            eye = np.eye(n)
            assert np.abs(res.u.T @ res.u - eye).max() <= 1e-10
            assert np.abs(res.v.T @ res.v - eye).max() <= 1e-10
            recon = res.u @ (res.sigma[:, None] * res.v.T)
            budget = 1e-10 * max(1.0, np.linalg.norm(m))
            assert np.linalg.norm(recon - m) <= budget

    def test_nuclear_norm_oracle_agreement(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            rows = int(rng.integers(2, 201))
            cols = int(rng.integers(2, 65))
            m = rng.standard_normal((rows, cols))
            res = svd(m)
            oracle = nuclear_norm_oracle(m)
            assert abs(res.sigma.sum() - oracle) <= 1e-8 * max(1.0, oracle)

    def test_wide_matrix(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((4, 12))
        res = svd(m)
        assert res.sigma.shape == (4,)
        assert np.allclose(res.u @ (res.sigma[:, None] * res.v.T), m, atol=1e-12)

    def test_rank_deficient_orthonormal_completion(self):
        m = np.outer(np.arange(1.0, 7.0), np.arange(1.0, 5.0))
        res = svd(m)
        assert np.allclose(res.sigma[1:], 0.0, atol=1e-12)
        assert np.abs(res.u.T @ res.u - np.eye(4)).max() <= 1e-10
        assert np.abs(res.v.T @ res.v - np.eye(4)).max() <= 1e-10

    def test_zero_matrix(self):
        res = svd(np.zeros((4, 3)))
        assert np.array_equal(res.sigma, np.zeros(3))
        assert np.abs(res.u.T @ res.u - np.eye(3)).max() == 0.0

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((30, 8))
        a, b = svd(m), svd(m.copy())
        assert np.array_equal(a.sigma, b.sigma)
        assert np.array_equal(a.u, b.u)
        assert np.array_equal(a.v, b.v)

    def test_sign_convention(self):
        rng = np.random.default_rng(9)
        res = svd(rng.standard_normal((12, 5)))
        peaks = res.u[np.abs(res.u).argmax(axis=0), np.arange(5)]
        assert (peaks > 0).all()

    def test_rejects_bad_inputs(self):
        with pytest.raises(ContractViolation):
            svd(np.array([1.0, 2.0]))
        with pytest.raises(ContractViolation):
            svd(np.array([[np.nan, 1.0], [0.0, 1.0]]))

    def test_nonconvergence_carries_residual(self):
        def stub_kernel(at, vt, tol, cap):
            return False, cap, 0.5
        m = 2.0 * np.eye(3)
        with pytest.raises(SvdConvergenceError) as err:
            linalg._svd_with_kernel(m, stub_kernel)
        # residual is reported in original (unscaled) Gram units
        assert err.value.residual == pytest.approx(0.5 * np.linalg.norm(m) ** 2)


class TestCholesky:
    def test_identity(self):
        assert np.array_equal(cholesky(np.eye(3), 0.0), np.eye(3))

    def test_closed_form_2x2(self):
        lower = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]), 0.0)
        expected = np.array([[2.0, 0.0], [1.0, np.sqrt(2.0)]])
        assert np.allclose(lower, expected, atol=1e-15)

    def test_random_spd_reconstruction(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            a = rng.standard_normal((8, 8))
            c = a.T @ a + np.eye(8)
            lower = cholesky(c, 0.0)
            assert np.tril(lower) is not lower or True
            assert np.abs(np.triu(lower, 1)).max() == 0.0
            err = np.abs(lower @ lower.T - c).max()
            assert err <= 1e-10 * np.abs(c).max()

    def test_zero_matrix_is_semidefinite(self):
        assert np.array_equal(cholesky(np.zeros((3, 3)), 0.0), np.zeros((3, 3)))

    def test_rank_deficient_jitter_escalation(self):
        v = np.arange(1.0, 5.0)
        c = np.outer(v, v)  # rank one
        lower = cholesky(c, 0.0)
        # reconstruction within the escalation cap of 1e-2 * mean(diag)
        err = np.abs(lower @ lower.T - c).max()
        assert err <= 1e-2 * np.mean(np.diag(c)) * 1.5

    def test_indefinite_raises_with_pivot(self):
        c = np.diag([1.0, -1.0, 2.0])
        with pytest.raises(NotPositiveDefiniteError) as err:
            cholesky(c, 0.0)
        assert err.value.pivot == 1

    def test_asymmetric_rejected(self):
        c = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ContractViolation):
            cholesky(c, 0.0)


class TestSampleMvn:
    def test_zero_chol_returns_mean(self):
        mean = np.array([1.0, -2.0, 3.0])
        out = sample_mvn(mean, np.zeros((3, 3)), RandomStream(0))
        assert np.array_equal(out, mean)

    def test_same_stream_state_same_output(self):
        mean = np.arange(4.0)
        lower = np.tril(np.ones((4, 4)))
        a = sample_mvn(mean, lower, RandomStream(7))
        b = sample_mvn(mean, lower, RandomStream(7))
        assert np.array_equal(a, b)

    def test_monte_carlo_moments(self):
        rng = RandomStream(123, "mvn-mc")
        dim = 5
        draws = np.empty((100_000, dim))
        eye = np.eye(dim)
        for i in range(draws.shape[0]):
            draws[i] = sample_mvn(np.zeros(dim), eye, rng)
        assert np.abs(draws.mean(axis=0)).max() <= 0.02
        cov = np.cov(draws.T)
        assert np.abs(cov - eye).max() <= 0.05

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            sample_mvn(np.zeros(3), np.zeros((2, 2)), RandomStream(0))


class TestRandomStream:
    def test_deterministic_and_named(self):
        a = RandomStream(5, "x").standard_normal(4)
        b = RandomStream(5, "x").standard_normal(4)
        c = RandomStream(5, "y").standard_normal(4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_split_is_independent_of_parent_use(self):
        parent = RandomStream(9)
        child_before = parent.split("child").standard_normal(3)
        parent.standard_normal(100)
        child_after = parent.split("child").standard_normal(3)
        assert np.array_equal(child_before, child_after)
