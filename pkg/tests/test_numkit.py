import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from modred.numkit import (SPDFactor, adjoint_mismatch, as_operator, cg_spd, lean_svd, lsqr_morozov,
                           make_operator, numerical_rank, orthonormal_basis, sparse_spd_solve)
from modred.priors import build_grid_laplacian


def span_equal(A, B, tol=1e-10):
    """Same column span: each projects the other onto itself."""
    PA = A @ np.linalg.pinv(A)
    PB = B @ np.linalg.pinv(B)
    return np.abs(PA - PB).max() < tol


class TestOrthonormalBasis:
    def test_identity(self):
        for method in ("svd", "qr"):
            Q = orthonormal_basis(np.eye(3), method)
            # identity up to column order and signs
            np.testing.assert_allclose(np.abs(Q) @ np.abs(Q).T, np.eye(3), atol=1e-14)

    def test_hand_gram_schmidt(self):
        # columns 2 e1 and e2 normalise to e1 and e2
        A = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        for method in ("svd", "qr"):
            Q = orthonormal_basis(A, method)
            assert Q.shape == (3, 2)
            np.testing.assert_allclose(Q[2], 0.0, atol=1e-15)
            assert span_equal(Q, np.eye(3)[:, :2])

    def test_proportional_columns(self):
        v = np.array([1.0, -2.0, 0.5, 3.0])
        for method in ("svd", "qr"):
            Q = orthonormal_basis(np.column_stack([v, -4 * v]), method)
            assert Q.shape[1] == 1
            np.testing.assert_allclose(abs(Q[:, 0] @ v) / np.linalg.norm(v), 1.0, rtol=1e-12)

    def test_zero_matrix_gives_empty_basis(self):
        for method in ("svd", "qr"):
            assert orthonormal_basis(np.zeros((5, 3)), method).shape == (5, 0)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            orthonormal_basis(np.eye(2), "lu")

    @settings(max_examples=30, deadline=None)
    @given(m=st.integers(1, 30), k=st.integers(1, 8), r=st.integers(0, 8), seed=st.integers(0, 2**31))
    def test_span_and_orthonormality(self, m, k, r, seed):
        rng = np.random.default_rng(seed)
        r = min(r, m, k)
        A = rng.standard_normal((m, r)) @ rng.standard_normal((r, k))
        for method in ("svd", "qr"):
            Q = orthonormal_basis(A, method)
            assert Q.shape[1] == r
            np.testing.assert_allclose(Q.T @ Q, np.eye(r), atol=1e-12)
            if r:
                assert span_equal(Q, A, tol=1e-8)


class TestLeanSVD:
    def test_diagonal(self):
        _, d, _ = lean_svd(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(d, [3.0, 1.0])

    def test_rank_one(self):
        u = np.array([2.0, 0.0, 0.0])
        v = np.array([0.0, 1.0])
        _, d, _ = lean_svd(np.outer(u, v))
        np.testing.assert_allclose(d, [2.0, 0.0], atol=1e-14)

    def test_random_reconstruction(self):
        A = np.random.default_rng(3).standard_normal((10, 4))
        U, d, V = lean_svd(A)
        assert np.linalg.norm(A - (U * d) @ V.T) <= 1e-10 * np.linalg.norm(A)
        np.testing.assert_allclose(U.T @ U, np.eye(4), atol=1e-12)
        np.testing.assert_allclose(V.T @ V, np.eye(4), atol=1e-12)
        assert np.all(np.diff(d) <= 0) and np.all(d >= 0)

    def test_zero_matrix(self):
        _, d, _ = lean_svd(np.zeros((4, 2)))
        np.testing.assert_array_equal(d, 0.0)

    def test_numerical_rank(self):
        assert numerical_rank(np.array([1.0, 1e-3, 1e-12])) == 2
        assert numerical_rank(np.zeros(3)) == 0


class TestOperators:
    def test_adjoint_consistency_of_sparse_matrix(self):
        A = sp.random(40, 25, density=0.2, random_state=1, format="csr")
        assert adjoint_mismatch(A) <= 1e-10

    def test_broken_adjoint_detected(self):
        B = np.random.default_rng(0).standard_normal((6, 4))
        op = make_operator((6, 4), lambda v: B @ v, lambda w: 2 * B.T @ w)
        assert adjoint_mismatch(op) > 1e-3

    def test_as_operator_passthrough(self):
        A = np.arange(6.0).reshape(3, 2)
        np.testing.assert_allclose(as_operator(A).matvec(np.ones(2)), A.sum(axis=1))


class TestLSQRMorozov:
    def test_identity(self):
        b = np.random.default_rng(1).standard_normal(7)
        res = lsqr_morozov(np.eye(7), b)
        np.testing.assert_allclose(res.x, b, atol=1e-10)

    def test_least_squares_oracle(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((20, 10))
        b = A @ rng.standard_normal(10)
        x_dense = np.linalg.solve(A.T @ A, A.T @ b)
        res = lsqr_morozov(A, b, max_iter=200)
        np.testing.assert_allclose(res.x, x_dense, atol=1e-8)
        assert res.reached_target

    def test_inconsistent_least_squares_oracle(self):
        rng = np.random.default_rng(5)
        A = rng.standard_normal((30, 6))
        b = rng.standard_normal(30)
        res = lsqr_morozov(A, b, max_iter=200)
        np.testing.assert_allclose(res.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-8)

    def test_discrepancy_stop(self):
        rng = np.random.default_rng(4)
        n = 60
        # mildly ill-posed smoothing operator
        t = np.linspace(0, 1, n)
        A = np.exp(-((t[:, None] - t[None, :]) ** 2) / 0.01) / n
        x = np.sin(2 * np.pi * t)
        e = 1e-3 * rng.standard_normal(n)
        noise = np.linalg.norm(e)
        for tau in (1.0, 1.5):
            res = lsqr_morozov(A, A @ x + e, noise_norm=noise, tau=tau)
            assert res.stop_reason == "discrepancy"
            assert res.residual_norm <= tau * noise
            assert res.history[-2] > tau * noise
            np.testing.assert_allclose(res.residual_norm, np.linalg.norm(A @ res.x - A @ x - e), rtol=1e-10)

    def test_residuals_nonincreasing(self):
        rng = np.random.default_rng(6)
        A = rng.standard_normal((50, 30))
        res = lsqr_morozov(A, rng.standard_normal(50), max_iter=30)
        h = np.array(res.history)
        assert np.all(np.diff(h) <= 1e-12 * h[0])

    def test_max_iter_flagged(self):
        A = np.random.default_rng(7).standard_normal((40, 40))
        res = lsqr_morozov(A, np.ones(40), noise_norm=1e-12, max_iter=3)
        assert res.iters == 3 and not res.reached_target and res.stop_reason == "max_iter"

    @pytest.mark.parametrize("kwargs", [dict(tau=0.5), dict(noise_norm=-1.0)])
    def test_bad_parameters(self, kwargs):
        with pytest.raises(ValueError):
            lsqr_morozov(np.eye(2), np.ones(2), **kwargs)

    def test_nonfinite_rhs(self):
        with pytest.raises(ValueError):
            lsqr_morozov(np.eye(2), np.array([1.0, np.nan]))


class TestCG:
    def test_identity_one_iteration(self):
        rhs = np.arange(1.0, 6.0)
        res = cg_spd(np.eye(5), rhs)
        np.testing.assert_allclose(res.x, rhs)
        assert res.iters == 1

    def test_dense_cholesky_oracle(self):
        rng = np.random.default_rng(0)
        B = rng.standard_normal((5, 5))
        M = B @ B.T + 5 * np.eye(5)
        rhs = rng.standard_normal(5)
        res = cg_spd(M, rhs, target_residual=1e-13)
        np.testing.assert_allclose(res.x, sla.cho_solve(sla.cho_factor(M), rhs), atol=1e-8)

    def test_singular_consistent(self):
        lap = build_grid_laplacian(4, 4).toarray()
        rhs = lap @ np.random.default_rng(1).standard_normal(16)
        res = cg_spd(lap, rhs, target_residual=1e-10)
        assert np.linalg.norm(lap @ res.x - rhs) <= 1e-9

    def test_nonsymmetric_rejected(self):
        with pytest.raises(ValueError):
            cg_spd(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones(2))

    def test_stop_callback(self):
        M = np.diag(np.arange(1.0, 21.0))
        res = cg_spd(M, np.ones(20), stop=lambda x, k: k >= 2)
        assert res.stop_reason == "stop" and res.iters == 2


class TestSparseSPD:
    def test_scaled_identity(self):
        np.testing.assert_allclose(sparse_spd_solve(2 * sp.identity(4, format="csr"), np.full(4, 2.0)), 1.0)

    def test_1d_laplacian_oracle(self):
        n, lam = 12, 3.0
        lap = sp.diags([-np.ones(n - 1), np.r_[1, 2 * np.ones(n - 2), 1], -np.ones(n - 1)], [-1, 0, 1])
        M = (lap + sp.identity(n) / lam**2).tocsr()
        rhs = np.eye(n)[0]
        np.testing.assert_allclose(sparse_spd_solve(M, rhs), np.linalg.solve(M.toarray(), rhs), atol=1e-8)

    def test_grid_residual(self):
        M = (build_grid_laplacian(8, 8) + sp.identity(64) / 4.0).tocsr()
        rhs = np.random.default_rng(2).standard_normal(64)
        x = sparse_spd_solve(M, rhs, tol=1e-10)
        assert np.linalg.norm(M @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)

    def test_indefinite_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            SPDFactor(sp.diags([1.0, -1.0, 2.0]).tocsr())

    def test_factor_matrix_rhs(self):
        M = (build_grid_laplacian(5, 5) + sp.identity(25)).tocsr()
        B = np.random.default_rng(3).standard_normal((25, 3))
        np.testing.assert_allclose(M @ SPDFactor(M).solve(B), B, atol=1e-10)
