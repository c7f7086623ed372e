"""Approximation-error statistics and the error-adjusted likelihood.

The error of replacing an accurate forward map by a surrogate is sampled
from the prior, summarised by its empirical mean and a low-rank
covariance factor ``S`` (``C = S S^T``), and enters the misfit through
``(C + sigma^2 I)^-1 = sigma^-2 (I - K K^T)``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .numkit import IterResult, as_operator, cg_spd, lean_svd, make_operator, numerical_rank

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    """A forward evaluation failed while building an error sample."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"draw {index} failed: {cause}")
        self.index = index


@dataclass
class ErrorSample:
    """Approximation-error draws stored as the columns of an ``m x L`` array."""

    draws: np.ndarray
    seed: int = 0
    description: str = ""

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=np.float64)
        if self.draws.ndim != 2 or self.draws.shape[1] < 1:
            raise ValueError("draws must be an m x L array with L >= 1")

    @property
    def m(self) -> int:
        return self.draws.shape[0]

    @property
    def L(self) -> int:
        return self.draws.shape[1]


@dataclass
class ErrorModel:
    mu: np.ndarray
    S: np.ndarray
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("noise level sigma must be positive")

    @property
    def m(self) -> int:
        return self.mu.shape[0]

    def scaled(self, t: float) -> "ErrorModel":
        """Same mean and noise, covariance multiplied by ``t``."""
        return ErrorModel(self.mu, math.sqrt(t) * self.S, self.sigma)


@dataclass
class KLExpansion:
    mu: np.ndarray
    lambdas: np.ndarray
    U: np.ndarray

    @property
    def rank(self) -> int:
        return self.U.shape[1]


def map_indexed(fn: Callable[[int], np.ndarray], n: int, workers: int = 1) -> list:
    """``[fn(0), ..., fn(n-1)]`` in index order, optionally on a thread pool."""
    if workers <= 1:
        return [fn(j) for j in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def sample_error(f_star, f, joint_sampler, L: int, seed: int, workers: int = 1,
                 description: str = "") -> ErrorSample:
    """Draw ``m_j = f_star(x_j) - f(z_j)`` with ``(x_j, z_j) = joint_sampler(seed + j)``."""
    if L < 1:
        raise ValueError("L must be >= 1")

    def one(j: int) -> np.ndarray:
        try:
            x, z = joint_sampler(seed + j)
            return np.asarray(f_star(x), dtype=np.float64) - np.asarray(f(z), dtype=np.float64)
        except Exception as exc:
            raise SamplingError(j, exc) from exc

    cols = map_indexed(one, L, workers)
    lengths = {c.shape for c in cols}
    if len(lengths) != 1:
        raise ValueError(f"draws have inconsistent shapes {sorted(lengths)}")
    return ErrorSample(np.column_stack(cols), seed=seed, description=description)


def error_statistics(sample: ErrorSample, sigma: float) -> ErrorModel:
    """Empirical mean and covariance factor; ``S S^T`` is the (1/L) covariance."""
    D = sample.draws
    mu = D.mean(axis=1)
    S = (D - mu[:, None]) / math.sqrt(sample.L)
    return ErrorModel(mu, S, float(sigma))


def kl_expand(model: ErrorModel, tol: float = 1e-10) -> KLExpansion:
    """Eigen-expansion of ``C = S S^T`` through the SVD of ``S``.

    ``lambdas`` are eigenvalues of ``C`` (squared singular values of ``S``),
    truncated at the numerical rank of ``S``.
    """
    U, d, _ = lean_svd(model.S)
    r = numerical_rank(d, tol)
    return KLExpansion(model.mu, d[:r] ** 2, U[:, :r].copy())


def smw_whitener(model: ErrorModel) -> np.ndarray:
    """``K = S R^T`` with ``R^T R = (sigma^2 I + S^T S)^-1``.

    With this factor ``(S S^T + sigma^2 I)^-1 = sigma^-2 (I - K K^T)``.
    """
    S = model.S
    k = S.shape[1]
    G = model.sigma**2 * np.eye(k) + S.T @ S
    try:
        C = sla.cholesky(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Cholesky of the k x k SMW core failed") from exc
    # G = C C^T, G^-1 = C^-T C^-1, so R = C^-1 and K^T = C^-1 S^T
    return sla.solve_triangular(C, S.T, lower=True).T


def apply_whitened(K: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``(I - K K^T) v``."""
    return v - K @ (K.T @ v)


def weighted_discrepancy(K: np.ndarray, r: np.ndarray) -> float:
    """``sqrt(r^T (I - K K^T) r)``: residual norm in data units after whitening."""
    return math.sqrt(max(float(r @ apply_whitened(K, r)), 0.0))


def weighted_misfit(kl: KLExpansion, sigma: float, r: np.ndarray) -> float:
    """``r^T (C + sigma^2 I)^-1 r`` summed over the eigendirections of ``C``.

    Directions outside the retained basis have eigenvalue zero.
    """
    c = kl.U.T @ r
    rest = r - kl.U @ c
    return float(np.sum(c**2 / (kl.lambdas + sigma**2)) + (rest @ rest) / sigma**2)


@dataclass
class BAEResult(IterResult):
    cg_history: list = field(default_factory=list)


def bae_normal_solve(A, b, model: ErrorModel, max_iter: int = 500, target: float = 1e-10,
                     noise_norm: float | None = None, tau: float = 1.0) -> BAEResult:
    """Minimise ``(b - mu - Ax)^T (C + sigma^2 I)^-1 (b - mu - Ax)`` matrix-free.

    Runs CG on ``A^T (I - KK^T) A x = A^T (I - KK^T)(b - mu)``. Iterations
    stop at the first iterate whose weighted discrepancy
    ``sqrt(r^T (I - KK^T) r)`` is at most ``tau * noise_norm`` (default
    ``noise_norm = sigma sqrt(m)``; pass 0 to disable), or when the normal
    residual drops below ``target`` relative to the initial one.

    ``history`` records the weighted discrepancy per iterate.
    """
    op = as_operator(A)
    m, n = op.shape
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (m,) or model.m != m:
        raise ValueError("data, operator and error model dimensions disagree")
    K = smw_whitener(model)
    d = b - model.mu
    if noise_norm is None:
        noise_norm = model.sigma * math.sqrt(m)
    goal = tau * noise_norm

    def normal(x):
        return op.rmatvec(apply_whitened(K, op.matvec(x)))

    N = make_operator((n, n), normal, normal)
    rhs = op.rmatvec(apply_whitened(K, d))
    disc = [weighted_discrepancy(K, d)]
    if goal > 0 and disc[0] <= goal:
        return BAEResult(np.zeros(n), disc[0], 0, True, "initial", disc, [float(np.linalg.norm(rhs))])

    def stop(x, k):
        disc.append(weighted_discrepancy(K, d - op.matvec(x)))
        return goal > 0 and disc[-1] <= goal

    res = cg_spd(N, rhs, target_residual=target * np.linalg.norm(rhs), max_iter=max_iter, stop=stop)
    final = weighted_discrepancy(K, d - op.matvec(res.x))
    if res.stop_reason == "target" and len(disc) <= res.iters:
        disc.append(final)
    reached = res.stop_reason == "stop" or (goal == 0 and res.reached_target)
    reason = "discrepancy" if res.stop_reason == "stop" else res.stop_reason
    if not reached:
        log.warning("BAE solve stopped (%s) before reaching its target", reason)
    return BAEResult(res.x, final, res.iters, reached, reason, disc, res.history)


def gaussian_map_estimate(F, b, model: ErrorModel, prior_precision) -> np.ndarray:
    """MAP estimate for a linear surrogate with Gaussian prior and error model.

    Minimises ``(b - mu - Fz)^T (C + sigma^2 I)^-1 (b - mu - Fz) + z^T Q z``
    with ``Q = prior_precision`` by a dense Cholesky solve of the normal
    equations. Intended for moderate ``n``.
    """
    op = as_operator(F)
    m, n = op.shape
    K = smw_whitener(model)
    Fd = op.matmat(np.eye(n))
    WF = (Fd - K @ (K.T @ Fd)) / model.sigma**2
    Q = prior_precision.toarray() if hasattr(prior_precision, "toarray") else np.asarray(prior_precision)
    H = Fd.T @ WF + Q
    g = WF.T @ (np.asarray(b, dtype=np.float64) - model.mu)
    try:
        cf = sla.cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("MAP normal matrix is singular") from exc
    return sla.cho_solve(cf, g)
