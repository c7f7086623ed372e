"""Clutter projectors and projected least-squares solves.

A :class:`Projector` holds an orthonormal basis ``U`` of the estimated
clutter subspace; data are fitted only in its orthogonal complement.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .baecore import ErrorSample, map_indexed
from .numkit import (IterResult, as_operator, lean_svd, lsqr_morozov, make_operator,
                     numerical_rank, orthonormal_basis)

log = logging.getLogger(__name__)


@dataclass
class Projector:
    U: np.ndarray

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def apply_P(self, v: np.ndarray) -> np.ndarray:
        return self.U @ (self.U.T @ v)

    def apply_Pperp(self, v: np.ndarray) -> np.ndarray:
        return v - self.U @ (self.U.T @ v)


@dataclass
class ClutterDiagnostics:
    """Spectrum of the estimated clutter covariance.

    ``tail[k]`` is the sum of the eigenvalues beyond the first ``k``;
    ``suggested_k`` is the smallest ``k`` with ``sqrt(tail[k])`` at or below
    the noise norm (the full rank when no noise norm was given).
    """

    lambdas: np.ndarray
    tail: np.ndarray
    suggested_k: int
    warnings: list = field(default_factory=list)


def make_diagnostics(lambdas, noise_norm: float | None = None, warnings=None) -> ClutterDiagnostics:
    lambdas = np.asarray(lambdas, dtype=np.float64)
    # tail[k] = sum_{j >= k} lambdas[j]; computed from the end so tail[r] is exactly 0
    tail = np.concatenate([np.cumsum(lambdas[::-1])[::-1], [0.0]])
    if noise_norm is None:
        k = lambdas.size
    else:
        k = int(np.flatnonzero(np.sqrt(tail) <= noise_norm)[0])
    return ClutterDiagnostics(lambdas, tail, k, list(warnings or []))


def projector_from_basis(U, tol: float = 1e-10) -> Projector:
    """Validate orthonormality of ``U`` and wrap it."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2:
        raise ValueError("basis must be a 2-D array")
    k = U.shape[1]
    if k and np.abs(U.T @ U - np.eye(k)).max() > tol:
        raise ValueError("basis columns are not orthonormal")
    return Projector(U)


def empty_projector(m: int) -> Projector:
    return Projector(np.zeros((m, 0)))


def _sketch_basis(Y: np.ndarray, method: str, noise_norm, tol: float, max_rank: int | None = None):
    m = Y.shape[0]
    _, d, _ = lean_svd(Y)
    warnings = []
    if d.size == 0 or d[0] == 0.0:
        msg = "sketch is identically zero; using a rank-0 projector"
        log.warning(msg)
        return empty_projector(m), make_diagnostics(np.zeros(0), noise_norm, [msg])
    r = numerical_rank(d, tol)
    lambdas = d[:r] ** 2
    if max_rank is not None and max_rank > r:
        msg = f"requested rank {max_rank} exceeds numerical rank {r}; truncated"
        log.warning(msg)
        warnings.append(msg)
    keep = r if max_rank is None else min(r, max_rank)
    U = orthonormal_basis(Y, method=method, tol=tol)[:, :keep]
    return Projector(U), make_diagnostics(lambdas, noise_norm, warnings)


def priorsketch(A2, x2_sampler, k: int, seed: int, method: str = "svd",
                noise_norm: float | None = None, tol: float = 1e-10, workers: int = 1):
    """Clutter basis from the range of ``A2 Omega``, ``Omega`` drawn from the prior.

    ``x2_sampler(seed + j)`` returns the ``j``-th nuisance draw; the sketch
    is ``A2 Omega`` with ``Omega = [x2_1 ... x2_k] / sqrt(k)``. Diagnostics
    carry the squared singular values of the sketch.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    op = as_operator(A2)

    def column(j):
        try:
            x2 = np.asarray(x2_sampler(seed + j), dtype=np.float64)
        except Exception as exc:
            raise RuntimeError(f"prior draw {j} failed: {exc}") from exc
        return op.matvec(x2) / math.sqrt(k)

    Y = np.column_stack(map_indexed(column, k, workers))
    return _sketch_basis(Y, method, noise_norm, tol)


def projector_from_error_sample(sample: ErrorSample, k: int, noise_norm: float | None = None,
                                tol: float = 1e-10):
    """First ``k`` left singular vectors of the centred, ``1/sqrt(L)``-scaled draws."""
    if not 1 <= k <= sample.L:
        raise ValueError(f"k must lie in [1, L={sample.L}]")
    D = sample.draws
    Mc = (D - D.mean(axis=1, keepdims=True)) / math.sqrt(sample.L)
    return _sketch_basis(Mc, "svd", noise_norm, tol, max_rank=k)


def project_system(proj: Projector, A, b, mu):
    """Operator ``v -> P_perp A v`` (adjoint ``w -> A^T P_perp w``) and rhs ``P_perp (b - mu)``."""
    op = as_operator(A)
    rhs = proj.apply_Pperp(np.asarray(b, dtype=np.float64) - mu)
    if proj.rank == 0:
        return op, rhs
    projected = make_operator(op.shape, lambda v: proj.apply_Pperp(op.matvec(v)),
                              lambda w: op.rmatvec(proj.apply_Pperp(w)))
    return projected, rhs


def spotlight_solve(proj: Projector, A, b, mu, noise_norm: float, tau: float = 1.0,
                    max_iter: int = 500) -> IterResult:
    """LSQR with discrepancy stopping on the projected system.

    ``noise_norm`` is compared with the projected residual; passing the
    unprojected noise norm is the conservative choice.
    """
    op, rhs = project_system(proj, A, b, mu)
    return lsqr_morozov(op, rhs, noise_norm=noise_norm, tau=tau, max_iter=max_iter)


def gaussian_clutter_map(A1, A2, C11, C22, Ce, b) -> np.ndarray:
    """Dense MAP estimate of ``x1`` with Gaussian clutter ``A2 x2``, ``x2 ~ N(0, C22)``.

    ``x1 = (A1^T G^-1 A1 + C11^-1)^-1 A1^T G^-1 b`` with
    ``G = A2 C22 A2^T + Ce``. Small problems only.
    """
    A1, A2 = np.atleast_2d(A1), np.atleast_2d(A2)
    G = A2 @ np.atleast_2d(C22) @ A2.T + np.atleast_2d(Ce)
    try:
        GA1 = np.linalg.solve(G, A1)
        Gb = np.linalg.solve(G, np.asarray(b, dtype=np.float64))
        H = A1.T @ GA1 + np.linalg.inv(np.atleast_2d(C11))
        return np.linalg.solve(H, A1.T @ Gb)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("clutter MAP system is singular") from exc
