"""Quick invariant suite behind ``modred check``.

Each check returns ``(ok, detail)``; the suite is small enough to run in a
few seconds and exercises every module on tiny instances.
"""
from __future__ import annotations

import numpy as np

from .baecore import ErrorModel, kl_expand, smw_whitener
from .eit import (Electrodes, cem_forward, frame_response, pairwise_frame, unit_disk_mesh)
from .numkit import adjoint_mismatch, lean_svd
from .priors import build_grid_laplacian
from .spotlight import projector_from_basis
from .tomo import (FanBeamGeometry, PixelGrid, build_coarsening, build_fanbeam_matrix,
                   center_region, coarse_matrix)


def _rng():
    return np.random.default_rng(20240601)


def check_projector():
    rng = _rng()
    worst = 0.0
    for _ in range(20):
        m, k = rng.integers(5, 60), rng.integers(0, 5)
        U = np.linalg.qr(rng.standard_normal((m, k)))[0] if k else np.zeros((m, 0))
        P = projector_from_basis(U)
        v = rng.standard_normal(m)
        Pv = P.apply_P(v)
        worst = max(worst, np.linalg.norm(P.apply_P(Pv) - Pv) / np.linalg.norm(v),
                    np.linalg.norm(Pv + P.apply_Pperp(v) - v) / np.linalg.norm(v))
    return worst <= 1e-12, f"max defect {worst:.2e}"


def check_smw():
    rng = _rng()
    worst = 0.0
    for sigma in (0.01, 0.1, 1.0, 10.0):
        S = rng.standard_normal((40, 6))
        K = smw_whitener(ErrorModel(np.zeros(40), S, sigma))
        prod = (S @ S.T + sigma**2 * np.eye(40)) @ (np.eye(40) - K @ K.T) / sigma**2
        worst = max(worst, np.linalg.norm(prod - np.eye(40)))
    return worst <= 1e-8, f"max Frobenius defect {worst:.2e}"


def check_kl():
    S = _rng().standard_normal((12, 5))
    kl = kl_expand(ErrorModel(np.zeros(12), S, 1.0))
    C = S @ S.T
    rec = np.linalg.norm((kl.U * kl.lambdas) @ kl.U.T - C) / np.linalg.norm(C)
    tr = abs(kl.lambdas.sum() - np.trace(C)) / np.trace(C)
    return max(rec, tr) <= 1e-10, f"reconstruction {rec:.2e}, trace {tr:.2e}"


def check_svd():
    A = _rng().standard_normal((10, 4))
    U, d, V = lean_svd(A)
    err = np.linalg.norm(A - (U * d) @ V.T) / np.linalg.norm(A)
    return err <= 1e-10, f"reconstruction {err:.2e}"


def check_laplacian():
    lap = build_grid_laplacian(6, 5)
    sym = abs(lap - lap.T).max()
    null = np.abs(lap @ np.ones(30)).max()
    return sym == 0 and null <= 1e-14, f"asymmetry {sym:.1e}, constant image {null:.1e}"


def check_tomo_matrices():
    grid = PixelGrid(16)
    A = build_fanbeam_matrix(grid, FanBeamGeometry(12, 21))
    cmap = build_coarsening(grid, center_region(grid, 8), 4)
    An = coarse_matrix(A, cmap)
    adj = max(adjoint_mismatch(A), adjoint_mismatch(An))
    dense = np.abs(An.toarray() - A.toarray() @ cmap.P.T.toarray()).max()
    return adj <= 1e-10 and dense <= 1e-12 and A.min() >= 0, f"adjoint {adj:.1e}, coarse product {dense:.1e}"


def check_cem():
    mesh = unit_disk_mesh(2)
    el = Electrodes(8)
    frame = pairwise_frame(8)
    sigma = np.exp(0.2 * _rng().standard_normal(mesh.n_elements))
    sol = cem_forward(mesh, sigma, el, frame)
    gauge = np.abs(sol.U.sum(axis=0)).max()
    R = frame_response(sol, frame)
    recip = np.abs(R - R.T).max() / np.abs(R).max()
    return gauge <= 1e-10 and recip <= 1e-8, f"gauge {gauge:.1e}, reciprocity {recip:.1e}"


CHECKS = {
    "projector algebra": check_projector,
    "SMW identity": check_smw,
    "KL reconstruction": check_kl,
    "lean SVD": check_svd,
    "grid Laplacian": check_laplacian,
    "tomography matrices": check_tomo_matrices,
    "CEM gauge and reciprocity": check_cem,
}


def run_checks():
    """``[(name, ok, detail), ...]`` for every registered check."""
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
