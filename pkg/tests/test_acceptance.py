"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.
"""
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg as sla

from acceptance_log import criterion
from modred.baecore import ErrorModel, error_statistics, gaussian_map_estimate, kl_expand, smw_whitener
from modred.cli import run_command
from modred.eit import (STANDARD_SHAPE, EITSetup, Electrodes, cem_forward, cem_jacobian, deform_mesh,
                        frame_response, pairwise_frame, run_eit_benchmark, smooth_inclusion, unit_disk_mesh)
from modred.formats import mrd1_bytes
from modred.spotlight import (gaussian_clutter_map, priorsketch, project_system, projector_from_basis,
                              projector_from_error_sample, spotlight_solve)
from modred.tomo import (TomoSetup, build_tomo_problem, run_tomo_benchmark, tomo_error_sample, tomo_prior,
                         tomo_reconstruct)

pytestmark = pytest.mark.slow


def test_01_projector_algebra():
    with criterion(1, "projector algebra", 5) as rec:
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(50):
            m = int(rng.integers(2, 201))
            k = int(rng.integers(1, min(20, m) + 1))
            P = projector_from_basis(np.linalg.qr(rng.standard_normal((m, k)))[0])
            for v in rng.standard_normal((5, m)):
                nv = np.linalg.norm(v)
                Pv = P.apply_P(v)
                worst = max(worst, np.linalg.norm(P.apply_P(Pv) - Pv) / nv,
                            np.linalg.norm(Pv + P.apply_Pperp(v) - v) / nv)
        rec["ok"] = worst <= 1e-12
        rec["detail"] = f"max relative defect {worst:.1e} (tol 1e-12)"
    assert rec["ok"]


def test_02_exact_clutter_elimination():
    with criterion(2, "exact clutter elimination", 5) as rec:
        rng = np.random.default_rng(102)
        m, n2, r = 120, 12, 6
        A2 = rng.standard_normal((m, r)) @ rng.standard_normal((r, n2))
        proj, _ = priorsketch(A2, lambda s: np.random.default_rng(s).standard_normal(n2), n2, seed=0)
        worst = 0.0
        for x2 in rng.standard_normal((100, n2)):
            c = A2 @ x2
            worst = max(worst, np.linalg.norm(proj.apply_Pperp(c)) / np.linalg.norm(c))
        rec["ok"] = proj.rank == r and worst <= 1e-10
        rec["detail"] = f"sketch rank {proj.rank} (clutter rank {r}), max |P_perp A2 x2|/|A2 x2| {worst:.1e} (tol 1e-10)"
    assert rec["ok"]


def test_03_smw_identity():
    with criterion(3, "Sherman-Morrison-Woodbury identity", 5) as rec:
        rng = np.random.default_rng(103)
        worst = 0.0
        for sigma in (0.01, 0.1, 1.0, 10.0):
            for _ in range(15):
                m, k = int(rng.integers(1, 101)), int(rng.integers(1, 11))
                S = rng.standard_normal((m, k))
                K = smw_whitener(ErrorModel(np.zeros(m), S, sigma))
                prod = (S @ S.T + sigma**2 * np.eye(m)) @ (np.eye(m) - K @ K.T) / sigma**2
                worst = max(worst, np.linalg.norm(prod - np.eye(m)))
        rec["ok"] = worst <= 1e-8
        rec["detail"] = f"max Frobenius defect {worst:.1e} (tol 1e-8)"
    assert rec["ok"]


def test_04_kl_reconstruction():
    with criterion(4, "KL reconstruction", 5) as rec:
        rng = np.random.default_rng(104)
        worst_C = worst_tr = 0.0
        for _ in range(20):
            m, L = int(rng.integers(2, 300)), int(rng.integers(1, 30))
            S = rng.standard_normal((m, L)) * rng.uniform(1e-3, 1e3)
            kl = kl_expand(ErrorModel(np.zeros(m), S, 1.0))
            C = S @ S.T
            worst_C = max(worst_C, np.linalg.norm((kl.U * kl.lambdas) @ kl.U.T - C) / np.linalg.norm(C))
            worst_tr = max(worst_tr, abs(kl.lambdas.sum() - np.trace(C)) / np.trace(C))
        rec["ok"] = worst_C <= 1e-10 and worst_tr <= 1e-10
        rec["detail"] = f"covariance defect {worst_C:.1e}, trace defect {worst_tr:.1e} (tol 1e-10)"
    assert rec["ok"]


def test_05_spotlight_is_bae_limit():
    with criterion(5, "spotlight as limit of BAE", 10) as rec:
        rng = np.random.default_rng(105)
        m, n, k = 20, 5, 3
        A1, A2 = rng.standard_normal((m, n)), rng.standard_normal((m, k))
        b = A1 @ rng.standard_normal(n) + A2 @ rng.standard_normal(k) + 0.01 * rng.standard_normal(m)
        proj = projector_from_basis(np.linalg.qr(A2)[0])
        x_spot = spotlight_solve(proj, A1, b, np.zeros(m), noise_norm=0.0).x
        base = ErrorModel(np.zeros(m), A2, 0.1)
        diffs = [np.linalg.norm(gaussian_map_estimate(A1, b, base.scaled(t), np.zeros((n, n))) - x_spot)
                 / np.linalg.norm(x_spot) for t in (1e2, 1e4, 1e6)]
        rec["ok"] = diffs[0] > diffs[1] > diffs[2] and diffs[2] <= 1e-3
        rec["detail"] = "relative differences " + ", ".join(f"{d:.1e}" for d in diffs) + " at t = 1e2, 1e4, 1e6"
    assert rec["ok"]


def test_06_gaussian_clutter_oracle():
    with criterion(6, "Gaussian clutter MAP vs dense minimiser", 10) as rec:
        rng = np.random.default_rng(106)
        worst = 0.0
        for _ in range(20):
            n1 = int(rng.integers(1, 16))
            n2 = int(rng.integers(1, 41 - n1))
            m = int(rng.integers(5, 40))
            A1, A2, b = rng.standard_normal((m, n1)), rng.standard_normal((m, n2)), rng.standard_normal(m)
            B1, B2 = rng.standard_normal((n1, n1)), rng.standard_normal((n2, n2))
            C11 = B1 @ B1.T / n1 + 0.5 * np.eye(n1)
            C22 = B2 @ B2.T / n2 + 0.1 * np.eye(n2)
            Ce = np.diag(rng.uniform(0.05, 0.5, m))
            # minimise |G^-1/2 (b - A1 x)|^2 + |C11^-1/2 x|^2 as one stacked least-squares problem
            Lg = np.linalg.cholesky(A2 @ C22 @ A2.T + Ce)
            Lc = np.linalg.cholesky(C11)
            top = sla.solve_triangular(Lg, np.column_stack([A1, b]), lower=True)
            bottom = sla.solve_triangular(Lc, np.eye(n1), lower=True)
            M = np.vstack([top[:, :n1], bottom])
            rhs = np.concatenate([top[:, n1], np.zeros(n1)])
            x_ref = np.linalg.lstsq(M, rhs, rcond=None)[0]
            x = gaussian_clutter_map(A1, A2, C11, C22, Ce, b)
            worst = max(worst, np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref))
        rec["ok"] = worst <= 1e-8
        rec["detail"] = f"max relative difference {worst:.1e} over 20 instances (tol 1e-8)"
    assert rec["ok"]


def _morozov_ok(history, target, reason):
    if reason == "discrepancy":
        return history[-1] <= target < history[-2]
    return reason == "converged"


def test_07_morozov_contract():
    with criterion(7, "Morozov contract on tomography data", 30) as rec:
        setup = TomoSetup()
        prob = build_tomo_problem(setup)
        b, e_norm, tau = prob.sino.b, prob.sino.noise_norm, setup.tau
        prior = tomo_prior(setup, prob.grid, gamma_default=float(prob.phantom.max()))
        sample = tomo_error_sample(prob, prior, setup.n_draws, setup.sample_seed)
        proj, _ = projector_from_error_sample(sample, sample.L - 1)
        model = error_statistics(sample, prob.sino.noise_std)
        runs = {
            "fine": tomo_reconstruct("fine", b, e_norm, A_fine=prob.A_N, tau=tau, max_iter=setup.max_iter),
            "naive": tomo_reconstruct("naive", b, e_norm, A_coarse=prob.A_n, tau=tau, max_iter=setup.max_iter),
            "spotlight": tomo_reconstruct("spotlight", b, e_norm, A_coarse=prob.A_n, model=model, projector=proj,
                                          tau=tau, max_iter=setup.max_iter),
        }
        op, rhs = project_system(proj, prob.A_n, b, model.mu)
        true_res = {"fine": np.linalg.norm(prob.A_N @ runs["fine"][0] - b),
                    "naive": np.linalg.norm(prob.A_n @ runs["naive"][0] - b),
                    "spotlight": np.linalg.norm(op.matvec(runs["spotlight"][0]) - rhs)}
        parts, ok = [], True
        for name, (_, d) in runs.items():
            good = _morozov_ok(d.history, tau * e_norm, d.stop_reason)
            good &= abs(true_res[name] - d.residual_norm) <= 1e-8 * true_res[name]
            ok &= good
            parts.append(f"{name} {d.stop_reason}@{d.iters} res/|e| {d.residual_norm / e_norm:.2f}")
        rec["ok"] = ok
        rec["detail"] = f"tau {tau:g}; " + ", ".join(parts)
    assert rec["ok"]


@pytest.fixture(scope="module")
def tomo_bench():
    t0 = time.perf_counter()
    out = run_tomo_benchmark(TomoSetup())
    return out, time.perf_counter() - t0


def test_08_tomography_surrogate(tomo_bench):
    out, elapsed = tomo_bench
    with criterion(8, "tomography desk-scale surrogate", None) as rec:
        ref = out["reference"]
        err = {k: out[k][1].roi_error for k in ("naive", "bae", "spotlight")}
        r_bae, r_spot = err["naive"] / err["bae"], err["naive"] / err["spotlight"]
        nref = np.linalg.norm(ref)
        gap = np.linalg.norm(out["bae"][0] - out["spotlight"][0]) / nref
        naive_gap = np.linalg.norm(out["naive"][0] - ref) / nref
        rec["ok"] = r_bae >= 2 and r_spot >= 2 and gap <= 0.5 * naive_gap and elapsed < 120
        rec["detail"] = (f"naive/bae {r_bae:.2f}, naive/spotlight {r_spot:.2f} (need >= 2); "
                         f"|bae - spot|/|ref| {gap:.3f} vs 0.5 x naive {0.5 * naive_gap:.3f}; "
                         f"benchmark {elapsed:.1f}s (limit 120s)")
    assert rec["ok"]


def test_09_eit_forward_validity():
    with criterion(9, "EIT forward validity", 120) as rec:
        el, frame = Electrodes(32, 0.5, 0.01), pairwise_frame(32)
        mesh = deform_mesh(unit_disk_mesh(4), STANDARD_SHAPE)
        sigma = smooth_inclusion(mesh.centroids())
        sol = cem_forward(mesh, sigma, el, frame)
        sums = np.abs(sol.U.sum(axis=0)).max()
        R = frame_response(sol, frame)
        recip = np.linalg.norm(R - R.T) / np.linalg.norm(R)
        el8, frame8 = Electrodes(8, 0.5, 0.01), pairwise_frame(8)
        V = [cem_forward(m, np.ones(m.n_elements), el8, frame8).V for m in map(unit_disk_mesh, (3, 4, 5, 6, 7))]
        d = [np.linalg.norm(V[i + 1] - V[i]) for i in range(4)]
        ratios = [d[i] / d[i + 1] for i in range(3)]
        rec["ok"] = sums <= 1e-10 and recip <= 1e-8 and min(ratios) >= 2
        rec["detail"] = (f"max voltage sum {sums:.1e}, reciprocity {recip:.1e}, "
                         "refinement ratios " + ", ".join(f"{r:.2f}" for r in ratios))
    assert rec["ok"]


def test_10_eit_jacobian():
    with criterion(10, "EIT Jacobian vs finite differences", 60) as rec:
        mesh = unit_disk_mesh(2)
        el, frame = Electrodes(8, 0.5, 0.01), pairwise_frame(8)
        c = mesh.centroids()
        sigma = 1.0 + 0.8 * np.exp(-8 * ((c[:, 0] - 0.3) ** 2 + c[:, 1] ** 2))
        J = cem_jacobian(mesh, sigma, el, frame)
        rng = np.random.default_rng(110)
        h, worst = 1e-5, 0.0
        directions = list(rng.standard_normal((5, mesh.n_elements))) + list(np.eye(mesh.n_elements)[[0, 57, 140]])
        for dx in directions:
            fd = (cem_forward(mesh, sigma * np.exp(h * dx), el, frame).V
                  - cem_forward(mesh, sigma * np.exp(-h * dx), el, frame).V) / (2 * h)
            worst = max(worst, np.linalg.norm(J @ dx - fd) / np.linalg.norm(fd))
        rec["ok"] = mesh.n_elements <= 400 and worst <= 1e-4
        rec["detail"] = f"{mesh.n_elements} elements, max relative mismatch {worst:.1e} (tol 1e-4)"
    assert rec["ok"]


def test_11_eit_surrogate():
    with criterion(11, "EIT desk-scale surrogate", 600) as rec:
        parts, ok = [], True
        for seed in (1, 2, 3):
            out = run_eit_benchmark(EITSetup(data_seed=seed))
            ratio = out["projected"][1] / out["unprojected"][1]
            ok &= ratio <= 0.75
            parts.append(f"seed {seed}: {out['projected'][1]:.3f}/{out['unprojected'][1]:.3f} = {ratio:.2f}")
        rec["ok"] = ok
        rec["detail"] = "projected/unprojected error " + "; ".join(parts) + " (need <= 0.75)"
    assert rec["ok"]


SMALL_TOMO = ["--set", "tomo.n_side=32", "--set", "tomo.region_size=16", "--set", "tomo.block=8",
              "--set", "tomo.n_draws=20"]
SMALL_EIT = ["--set", "eit.refinement=3", "--set", "eit.data_refinement=3", "--set", "eit.n_electrodes=16"]


def _cli_outputs(root):
    steps = [
        ["tomo-simulate", *SMALL_TOMO, "--out", f"{root}/sim"],
        ["bae-sample", "--kind", "tomo", *SMALL_TOMO, "--out", f"{root}/sample.mrd1"],
        ["spotlight-basis", "--sample", f"{root}/sample.mrd1", "--out", f"{root}/basis.mrd1"],
        ["tomo-reconstruct", *SMALL_TOMO, "--sino", f"{root}/sim/sinogram.mrd1", "--method", "bae",
         "--sample", f"{root}/sample.mrd1", "--out", f"{root}/bae"],
        ["tomo-reconstruct", *SMALL_TOMO, "--sino", f"{root}/sim/sinogram.mrd1", "--method", "spotlight",
         "--sample", f"{root}/sample.mrd1", "--basis", f"{root}/basis.mrd1", "--out", f"{root}/spot"],
        ["eit-simulate", *SMALL_EIT, "--out", f"{root}/esim"],
        ["eit-reconstruct", *SMALL_EIT, "--data", f"{root}/esim/voltages.mrd1", "--out", f"{root}/erec"],
    ]
    for argv in steps:
        if run_command(argv) != 0:
            raise RuntimeError(f"command failed: {' '.join(argv)}")
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*.mrd1"))}


def test_12_determinism(tmp_path, tomo_bench):
    with criterion(12, "determinism of MRD1 outputs", None) as rec:
        a = _cli_outputs(tmp_path / "a")
        b = _cli_outputs(tmp_path / "b")
        same_cli = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
        first, _ = tomo_bench
        again = run_tomo_benchmark(TomoSetup())
        same_bench = all(mrd1_bytes(first[k][0]) == mrd1_bytes(again[k][0])
                         for k in ("fine", "naive", "bae", "spotlight"))
        rec["ok"] = same_cli and same_bench and len(a) >= 8
        rec["detail"] = (f"{len(a)} CLI MRD1 files identical: {same_cli}; "
                         f"benchmark reconstructions identical: {same_bench}")
    assert rec["ok"]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
