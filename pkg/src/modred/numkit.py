"""Linear algebra kernels shared by the rest of the package.

Dense matrices are plain ``numpy`` arrays, sparse matrices are
``scipy.sparse`` CSR matrices and matrix-free operators are
``scipy.sparse.linalg.LinearOperator`` instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import LinearOperator, aslinearoperator

ORTHO_TOL = 1e-12
RANK_TOL = 1e-10


def as_operator(A) -> LinearOperator:
    """Wrap a dense array, sparse matrix or operator as a ``LinearOperator``."""
    if isinstance(A, LinearOperator):
        return A
    return aslinearoperator(A)


def make_operator(shape, matvec, rmatvec) -> LinearOperator:
    """Build a matrix-free operator from forward and adjoint callables."""
    return LinearOperator(shape, matvec=matvec, rmatvec=rmatvec, dtype=np.float64)


def adjoint_mismatch(A, n_probes: int = 10, seed: int = 0) -> float:
    """Largest relative violation of <Av, w> = <v, A^T w> over random probes.

    The mismatch of each probe is scaled by ``|Av| |w| + |v| |A^T w|``,
    which bounds both inner products.
    """
    op = as_operator(A)
    m, n = op.shape
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        v = rng.standard_normal(n)
        w = rng.standard_normal(m)
        Av = op.matvec(v)
        Atw = op.rmatvec(w)
        scale = np.linalg.norm(Av) * np.linalg.norm(w) + np.linalg.norm(v) * np.linalg.norm(Atw)
        if scale == 0.0:
            continue
        worst = max(worst, abs(Av @ w - v @ Atw) / scale)
    return worst


def lean_svd(A: np.ndarray):
    """Thin SVD ``A = U diag(d) V^T`` with ``r = min(m, k)`` columns.

    Returns ``(U, d, V)``; ``d`` is nonincreasing and nonnegative.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    U, d, Vt = np.linalg.svd(A, full_matrices=False)
    return U, d, Vt.T


def numerical_rank(d: np.ndarray, tol: float = RANK_TOL) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    if d.size == 0 or d[0] <= 0.0:
        return 0
    return int(np.count_nonzero(d > tol * d[0]))


def orthonormal_basis(A: np.ndarray, method: str = "svd", tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the numerical column span of ``A``.

    Parameters
    ----------
    A : (m, k) array
    method : {"svd", "qr"}
        ``"svd"`` keeps left singular vectors whose singular value exceeds
        ``tol * d[0]``; ``"qr"`` uses column-pivoted QR and the same cut on
        the diagonal of ``R``.
    tol : float
        Relative rank cut.

    Returns
    -------
    (m, r) array with orthonormal columns, ``r = 0`` for a zero matrix.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    m = A.shape[0]
    if method == "svd":
        U, d, _ = lean_svd(A)
        return U[:, : numerical_rank(d, tol)].copy()
    if method == "qr":
        Q, R, _ = sla.qr(A, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        if diag.size == 0 or diag[0] == 0.0:
            return np.zeros((m, 0))
        r = int(np.count_nonzero(diag > tol * diag[0]))
        return Q[:, :r].copy()
    raise ValueError(f"unknown basis method {method!r}")


@dataclass
class IterResult:
    """Outcome of an iterative solve.

    ``history`` holds the monitored residual norm at every iterate,
    starting with the initial guess.
    """

    x: np.ndarray
    residual_norm: float
    iters: int
    reached_target: bool
    stop_reason: str
    history: list = field(default_factory=list)


def lsqr_morozov(A, b, noise_norm: float = 0.0, tau: float = 1.0, max_iter: int = 500,
                 atol: float = 1e-12) -> IterResult:
    """LSQR stopped by the discrepancy principle.

    Iterates Golub-Kahan bidiagonalisation from ``x0 = 0`` and stops at the
    first iterate with ``|Ax - b| <= tau * noise_norm``. With
    ``noise_norm = 0`` it runs to numerical convergence, judged by the
    normal-equation residual estimate ``|A^T r| <= atol |A| |r|``.

    The monitored residual is recomputed from ``x`` at every step, so
    ``history`` and ``residual_norm`` are true residual norms.
    """
    if tau < 1.0:
        raise ValueError("tau must be >= 1")
    if noise_norm < 0.0:
        raise ValueError("noise_norm must be nonnegative")
    op = as_operator(A)
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side has non-finite entries")
    m, n = op.shape
    if b.shape != (m,):
        raise ValueError(f"rhs length {b.shape} does not match operator rows {m}")

    target = tau * noise_norm
    x = np.zeros(n)
    beta = float(np.linalg.norm(b))
    history = [beta]
    if beta == 0.0 or (target > 0.0 and beta <= target):
        return IterResult(x, beta, 0, target > 0.0 or beta == 0.0, "initial", history)

    u = b / beta
    v = op.rmatvec(u)
    alpha = float(np.linalg.norm(v))
    if alpha == 0.0:
        return IterResult(x, beta, 0, False, "rhs orthogonal to range", history)
    v = v / alpha
    w = v.copy()
    phibar, rhobar = beta, alpha
    anorm2 = alpha * alpha

    reason = "max_iter"
    reached = False
    it = 0
    for it in range(1, max_iter + 1):
        u = op.matvec(v) - alpha * u
        beta = float(np.linalg.norm(u))
        if beta > 0.0:
            u /= beta
        v = op.rmatvec(u) - beta * v
        alpha = float(np.linalg.norm(v))
        if alpha > 0.0:
            v /= alpha
        anorm2 += alpha * alpha + beta * beta

        rho = math.hypot(rhobar, beta)
        c, s = rhobar / rho, beta / rho
        theta = s * alpha
        rhobar = -c * alpha
        phi = c * phibar
        phibar = s * phibar
        x += (phi / rho) * w
        w = v - (theta / rho) * w

        res = float(np.linalg.norm(b - op.matvec(x)))
        history.append(res)
        if target > 0.0 and res <= target:
            reason, reached = "discrepancy", True
            break
        arnorm = phibar * alpha * abs(c)
        if beta == 0.0 or alpha == 0.0 or arnorm <= atol * math.sqrt(anorm2) * max(res, 1e-300):
            reason = "converged"
            reached = target == 0.0
            break
    return IterResult(x, history[-1], it, reached, reason, history)


def symmetry_mismatch(M, n_probes: int = 3, seed: int = 0) -> float:
    """Relative violation of <Mv, w> = <v, Mw> over random probes."""
    op = as_operator(M)
    n = op.shape[0]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        v = rng.standard_normal(n)
        w = rng.standard_normal(n)
        Mv, Mw = op.matvec(v), op.matvec(w)
        scale = np.linalg.norm(Mv) * np.linalg.norm(w) + np.linalg.norm(v) * np.linalg.norm(Mw)
        if scale > 0.0:
            worst = max(worst, abs(Mv @ w - v @ Mw) / scale)
    return worst


def cg_spd(M, rhs, target_residual: float = 0.0, max_iter: int = 500,
           stop: Optional[Callable[[np.ndarray, int], bool]] = None,
           symmetry_tol: float = 1e-10) -> IterResult:
    """Conjugate gradients for a symmetric positive semidefinite operator.

    Stops when ``|M x - rhs| <= target_residual``, when ``stop(x, k)``
    returns True, or after ``max_iter`` steps. The operator is probed for
    symmetry before iterating and rejected with ``ValueError`` if it fails.
    """
    op = as_operator(M)
    n = op.shape[0]
    if op.shape != (n, n):
        raise ValueError("operator must be square")
    if symmetry_mismatch(op) > symmetry_tol:
        raise ValueError("operator failed the symmetry probe")
    rhs = np.asarray(rhs, dtype=np.float64)

    x = np.zeros(n)
    r = rhs.copy()
    p = r.copy()
    rr = float(r @ r)
    history = [math.sqrt(rr)]
    reason, reached = "max_iter", False
    it = 0
    if history[0] <= target_residual:
        return IterResult(x, history[0], 0, True, "initial", history)
    for it in range(1, max_iter + 1):
        q = op.matvec(p)
        pq = float(p @ q)
        if pq <= 0.0:
            reason = "breakdown"
            it -= 1
            break
        a = rr / pq
        x += a * p
        r -= a * q
        rr_new = float(r @ r)
        history.append(math.sqrt(rr_new))
        if history[-1] <= target_residual:
            reason, reached = "target", True
            break
        if stop is not None and stop(x, it):
            reason, reached = "stop", True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(rhs - op.matvec(x)))
    return IterResult(x, res, it, reached, reason, history)


class SPDFactor:
    """Banded Cholesky factorisation of a sparse SPD matrix.

    The matrix is reordered with reverse Cuthill-McKee so that mesh and
    grid operators have a narrow band; non-definiteness surfaces as
    ``numpy.linalg.LinAlgError`` during factorisation.
    """

    def __init__(self, M, sym_tol: float = 1e-12):
        M = sp.csr_matrix(M, dtype=np.float64)
        n = M.shape[0]
        if M.shape != (n, n):
            raise ValueError("matrix must be square")
        scale = abs(M).max() if M.nnz else 0.0
        if scale == 0.0:
            raise np.linalg.LinAlgError("zero matrix is not positive definite")
        if abs(M - M.T).max() > sym_tol * scale:
            raise ValueError("matrix is not symmetric")
        perm = reverse_cuthill_mckee(M, symmetric_mode=True)
        Mp = sp.triu(M[perm][:, perm]).tocoo()
        bw = int((Mp.col - Mp.row).max())
        ab = np.zeros((bw + 1, n))
        ab[bw + Mp.row - Mp.col, Mp.col] = Mp.data
        try:
            self._cb = sla.cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("matrix is not positive definite") from exc
        self.n = n
        self.bandwidth = bw
        self._perm = perm
        self._M = M

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=np.float64)
        out = np.empty_like(rhs)
        out[self._perm] = sla.cho_solve_banded((self._cb, False), rhs[self._perm])
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self._M @ x


def sparse_spd_solve(M, rhs, tol: float = 1e-10) -> np.ndarray:
    """Solve ``M x = rhs`` for sparse SPD ``M``; checks ``|Mx - rhs| <= tol |rhs|``."""
    fac = SPDFactor(M)
    x = fac.solve(rhs)
    res = np.linalg.norm(fac.matvec(x) - rhs)
    if res > tol * np.linalg.norm(rhs):
        raise np.linalg.LinAlgError(f"residual {res:.3e} above tolerance")
    return x
