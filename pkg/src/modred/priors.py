"""Gaussian random fields with a shifted-Laplacian precision root, and
their component-wise sigmoid push-forward used as a positivity prior."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.special import expit

from .numkit import SPDFactor


def field_rng(seed: int) -> np.random.Generator:
    """Counter-based generator for one draw; draw ``j`` uses ``seed + j``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def build_grid_laplacian(nx: int, ny: int) -> sp.csr_matrix:
    """Five-point Laplacian (as the positive operator -Delta) on an nx-by-ny grid.

    Node ``(ix, iy)`` has index ``iy * nx + ix``. Boundary nodes only couple
    to existing neighbours (zero-flux), so rows sum to zero.
    """
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2 nodes per direction")
    idx = np.arange(nx * ny).reshape(ny, nx)
    pairs = np.vstack([
        np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()]),
        np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()]),
    ])
    return _laplacian_from_pairs(pairs, nx * ny)


def build_graph_laplacian(pairs, n_nodes: int | None = None) -> sp.csr_matrix:
    """Graph Laplacian ``D - Adj`` for undirected edges ``pairs`` (E x 2).

    Raises ``ValueError`` for an empty or disconnected graph.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("graph has no edges")
    if n_nodes is None:
        n_nodes = int(pairs.max()) + 1
    if np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValueError("self loops are not allowed")
    lap = _laplacian_from_pairs(pairs, n_nodes)
    n_comp, _ = connected_components(lap, directed=False)
    if n_comp != 1:
        raise ValueError(f"graph has {n_comp} connected components")
    return lap


def _laplacian_from_pairs(pairs: np.ndarray, n: int) -> sp.csr_matrix:
    i, j = pairs[:, 0], pairs[:, 1]
    adj = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    lap = sp.diags(deg) - adj
    lap = lap.tocsr()
    lap.sort_indices()
    return lap


@dataclass(frozen=True, eq=False)
class GaussianFieldPrior:
    """Field ``xi`` with ``(Lap + lam^-2 I) xi = w``, ``w`` standard normal."""

    laplacian: sp.csr_matrix
    lam: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("correlation length must be positive")

    @property
    def dim(self) -> int:
        return self.laplacian.shape[0]

    @cached_property
    def precision_root(self) -> sp.csr_matrix:
        return (self.laplacian + sp.identity(self.dim) / self.lam**2).tocsr()

    @cached_property
    def factor(self) -> SPDFactor:
        return SPDFactor(self.precision_root)


@dataclass(frozen=True, eq=False)
class SigmoidFieldPrior:
    field: GaussianFieldPrior
    xi0: float = 0.0
    alpha: float = 3.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0:
            raise ValueError("alpha and gamma must be positive")


def white_noise(dim: int, n_draws: int, seed: int) -> np.ndarray:
    """Standard normal columns, column ``j`` from generator ``seed + j``."""
    return np.column_stack([field_rng(seed + j).standard_normal(dim) for j in range(n_draws)])


def draw_gaussian_field(prior: GaussianFieldPrior, n_draws: int, seed: int,
                        tol: float = 1e-8) -> np.ndarray:
    """Draws of the Gaussian field as columns of a ``dim x n_draws`` array."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    W = white_noise(prior.dim, n_draws, seed)
    Xi = prior.factor.solve(W)
    res = np.linalg.norm(prior.precision_root @ Xi - W, axis=0)
    bad = np.flatnonzero(res > tol * np.linalg.norm(W, axis=0))
    if bad.size:
        raise np.linalg.LinAlgError(f"field solve inaccurate for draw {int(bad[0])}")
    return Xi


def sigmoid_transform(xi, xi0: float, alpha: float, gamma: float) -> np.ndarray:
    """``gamma / (1 + exp(alpha (xi0 - xi)))`` evaluated without overflow."""
    if alpha <= 0 or gamma <= 0:
        raise ValueError("alpha and gamma must be positive")
    return gamma * expit(alpha * (np.asarray(xi, dtype=np.float64) - xi0))


def draw_sigmoid_prior(prior: SigmoidFieldPrior, n_draws: int, seed: int) -> np.ndarray:
    xi = draw_gaussian_field(prior.field, n_draws, seed)
    return sigmoid_transform(xi, prior.xi0, prior.alpha, prior.gamma)
