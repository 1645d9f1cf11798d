import numpy as np
import pytest
import torch
from helpers import spd_matrix

from structdgp.errors import DimensionMismatch, NotPositiveDefinite
from structdgp.linalg import (
    GaussianMoments,
    block_chol_update,
    cholesky,
    diag_of_product,
    gaussian_condition,
    gaussian_propagate,
    pca_map,
    tri_solve,
)


class TestCholesky:
    def test_identity(self):
        l = cholesky(np.eye(3), jitter=0.0)
        np.testing.assert_allclose(l.numpy(), np.eye(3))

    def test_hand_expanded_2x2(self):
        l = cholesky([[4.0, 2.0], [2.0, 3.0]], jitter=0.0)
        np.testing.assert_allclose(l.numpy(), [[2.0, 0.0], [1.0, np.sqrt(2.0)]])

    def test_random_spd_reconstruction(self):
        gen = np.random.default_rng(0)
        a = spd_matrix(gen, 8)
        l = cholesky(a)
        rel = np.linalg.norm(l.numpy() @ l.numpy().T - a) / np.linalg.norm(a)
        assert rel < 1e-10

    def test_jitter_added(self):
        a = np.zeros((2, 2))
        l = cholesky(a, jitter=4.0)
        np.testing.assert_allclose(l.numpy(), 2.0 * np.eye(2))

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky([[1.0, 0.0], [0.0, -1.0]], jitter=0.0)

    def test_rejects_asymmetric(self):
        with pytest.raises(DimensionMismatch):
            cholesky([[1.0, 5.0], [0.0, 1.0]])


class TestTriSolve:
    def test_identity(self):
        b = np.arange(6.0).reshape(3, 2)
        np.testing.assert_allclose(tri_solve(np.eye(3), b).numpy(), b)

    def test_forward_substitution_by_hand(self):
        l = cholesky([[4.0, 2.0], [2.0, 3.0]], jitter=0.0)
        x = tri_solve(l, [[2.0], [1.0]])
        np.testing.assert_allclose(x.numpy(), [[1.0], [0.0]], atol=1e-14)

    def test_random_residual(self):
        gen = np.random.default_rng(1)
        l = np.linalg.cholesky(spd_matrix(gen, 6))
        b = gen.standard_normal((6, 3))
        x = tri_solve(l, b).numpy()
        assert np.linalg.norm(l @ x - b) < 1e-10 * np.linalg.norm(b)

    def test_transpose_mode(self):
        gen = np.random.default_rng(2)
        l = np.linalg.cholesky(spd_matrix(gen, 5))
        b = gen.standard_normal((5, 2))
        x = tri_solve(l, b, transpose=True).numpy()
        assert np.linalg.norm(l.T @ x - b) < 1e-10 * np.linalg.norm(b)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            tri_solve(np.eye(3), np.ones((4, 1)))


class TestBlockCholUpdate:
    def test_block_diagonal_identity(self):
        out = block_chol_update(np.eye(2), np.zeros((2, 1)), np.eye(1))
        np.testing.assert_allclose(out.numpy(), np.eye(3))

    def test_matches_full_factorization(self):
        gen = np.random.default_rng(3)
        for _ in range(200):
            a = spd_matrix(gen, 6)
            l_full = np.linalg.cholesky(a)
            l_prev = np.linalg.cholesky(a[:4, :4])
            out = block_chol_update(l_prev, a[:4, 4:], a[4:, 4:]).numpy()
            assert np.linalg.norm(out - l_full) < 1e-8 * np.linalg.norm(l_full)

    def test_reconstruction_with_dependent_cross(self):
        gen = np.random.default_rng(4)
        a = spd_matrix(gen, 4)
        l_prev = np.linalg.cholesky(a)
        # cross block proportional to a column of the top-left block itself
        s_cross = a[:, :1].copy()
        s_new = np.array([[a[0, 0] + 1.0]])
        out = block_chol_update(l_prev, s_cross, s_new).numpy()
        assert out.shape == (5, 5)
        full = np.block([[a, s_cross], [s_cross.T, s_new]])
        np.testing.assert_allclose(out @ out.T, full, atol=1e-8)

    def test_schur_failure(self):
        with pytest.raises(NotPositiveDefinite):
            block_chol_update(np.eye(1), np.array([[2.0]]), np.array([[1.0]]))


class TestGaussianConditionPropagate:
    def test_block_diagonal_independence(self):
        cov = np.diag([1.0, 2.0, 3.0])
        joint = GaussianMoments(np.array([1.0, 2.0, 3.0]), cov)
        marg, cond = gaussian_condition(joint, 2)
        np.testing.assert_allclose(cond.gain.numpy(), np.zeros((1, 2)))
        np.testing.assert_allclose(cond.cov.numpy(), [[3.0]])

    def test_2d_scalar_formula(self):
        joint = GaussianMoments(np.zeros(2), np.array([[1.0, 0.5], [0.5, 1.0]]))
        _, cond = gaussian_condition(joint, 1)
        mean_at_1 = cond.offset + cond.gain @ torch.tensor([1.0]).double()
        np.testing.assert_allclose(mean_at_1.numpy(), [0.5])
        np.testing.assert_allclose(cond.cov.numpy(), [[0.75]])

    def test_conditional_matches_mc(self):
        gen = np.random.default_rng(5)
        cov = spd_matrix(gen, 4)
        mean = gen.standard_normal(4)
        joint = GaussianMoments(mean, cov)
        _, cond = gaussian_condition(joint, 2)
        # exact conditional sampling: x fixed, y | x Gaussian
        x = torch.tensor(gen.standard_normal(2)).double()
        n = 10**6
        torch.manual_seed(0)
        lc = torch.linalg.cholesky(cond.cov)
        draws = (cond.offset + cond.gain @ x) + torch.randn(n, 2).double() @ lc.T
        emp_mean = draws.mean(0)
        se = draws.std(0) / np.sqrt(n)
        diff = (emp_mean - (cond.offset + cond.gain @ x)).abs()
        assert bool((diff < 3 * se).all())
        emp_cov = torch.cov(draws.T).numpy()
        cc = cond.cov.numpy()
        # Gaussian sampling error of covariance entries: (c_ii c_jj + c_ij^2)/n
        se_cov = np.sqrt((np.outer(np.diag(cc), np.diag(cc)) + cc**2) / n)
        assert (np.abs(emp_cov - cc) < 4 * se_cov).all()

    def test_propagate_identity(self):
        inp = GaussianMoments(np.array([1.0, -1.0]), np.eye(2))
        out = gaussian_propagate(np.zeros(2), np.eye(2), np.zeros((2, 2)), inp)
        np.testing.assert_allclose(out.mean.numpy(), inp.mean.numpy())
        np.testing.assert_allclose(out.cov.numpy(), inp.cov.numpy())

    def test_propagate_scalar_expansion(self):
        inp = GaussianMoments(np.array([1.0]), np.array([[1.0]]))
        out = gaussian_propagate(np.array([0.5]), 2 * np.eye(1), 3 * np.eye(1), inp)
        np.testing.assert_allclose(out.mean.numpy(), [2.5])
        np.testing.assert_allclose(out.cov.numpy(), [[7.0]])

    def test_propagate_matches_sampling(self):
        gen = np.random.default_rng(6)
        inp = GaussianMoments(gen.standard_normal(3), spd_matrix(gen, 3))
        gain = torch.tensor(gen.standard_normal((2, 3))).double()
        noise = torch.tensor(spd_matrix(gen, 2)).double()
        offset = torch.tensor(gen.standard_normal(2)).double()
        out = gaussian_propagate(offset, gain, noise, inp)
        torch.manual_seed(1)
        n = 10**6
        lx = torch.linalg.cholesky(inp.cov)
        ln = torch.linalg.cholesky(noise)
        xs = inp.mean + torch.randn(n, 3).double() @ lx.T
        ys = offset + xs @ gain.T + torch.randn(n, 2).double() @ ln.T
        se = ys.std(0) / np.sqrt(n)
        assert bool(((ys.mean(0) - out.mean).abs() < 4 * se).all())

    def test_tower_property(self):
        # condition then propagate over the conditioned variable recovers the joint
        gen = np.random.default_rng(7)
        for _ in range(20):
            cov = spd_matrix(gen, 5)
            mean = gen.standard_normal(5)
            joint = GaussianMoments(mean, cov)
            marg, cond = gaussian_condition(joint, 2)
            rec = gaussian_propagate(cond.offset, cond.gain, cond.cov, marg)
            np.testing.assert_allclose(rec.mean.numpy(), mean[2:], atol=1e-10)
            np.testing.assert_allclose(rec.cov.numpy(), cov[2:, 2:], atol=1e-10)


class TestDiagOfProduct:
    def test_identity_sides(self):
        gen = np.random.default_rng(8)
        b = gen.standard_normal((4, 4))
        out = diag_of_product(np.eye(4), b, np.eye(4))
        np.testing.assert_allclose(out.numpy(), np.diag(b))

    def test_matches_dense_triple_product(self):
        gen = np.random.default_rng(9)
        for _ in range(200):
            c = gen.standard_normal((5, 3))
            b = gen.standard_normal((5, 5))
            a = gen.standard_normal((5, 3))
            out = diag_of_product(c, b, a).numpy()
            np.testing.assert_allclose(out, np.diag(c.T @ b @ a), atol=1e-12)

    def test_zero_middle(self):
        out = diag_of_product(np.ones((4, 2)), np.zeros((4, 4)), np.ones((4, 2)))
        np.testing.assert_allclose(out.numpy(), np.zeros(2))

    def test_non_square_result_rejected(self):
        with pytest.raises(DimensionMismatch):
            diag_of_product(np.ones((4, 2)), np.eye(4), np.ones((4, 3)))


class TestPcaMap:
    def test_axis_aligned_variance_order(self):
        gen = np.random.default_rng(10)
        x = np.stack([np.sqrt(3.0) * gen.standard_normal(500),
                      gen.standard_normal(500)], axis=1)
        w = pca_map(x, 1).numpy()
        # top direction close to the first axis, sign-fixed positive
        assert abs(w[0, 0]) > 0.99 and w[0, 0] > 0

    def test_whitened_full_rank_orthogonal(self):
        gen = np.random.default_rng(11)
        x = gen.standard_normal((300, 4))
        x = (x - x.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(x.T))).T
        w = pca_map(x, 4).numpy()
        np.testing.assert_allclose(w.T @ w, np.eye(4), atol=1e-8)

    def test_padding_beyond_input_dim(self):
        gen = np.random.default_rng(12)
        x = gen.standard_normal((50, 2))
        w = pca_map(x, 5).numpy()
        assert w.shape == (2, 5)
        np.testing.assert_allclose(w[:, 2:], np.zeros((2, 3)))

    def test_degenerate_data_gives_zero_columns(self):
        x = np.ones((10, 3))
        w = pca_map(x, 3).numpy()
        np.testing.assert_allclose(w, np.zeros((3, 3)))
