"""Complete-electrode-model EIT on deformable disk meshes.

Meshes are built on the unit disk and deformed node by node, so element
``e`` of a deformed mesh is the image of element ``e`` of the unit mesh.
A conductivity given per element on the unit disk therefore pushes
forward to the deformed domain without interpolation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import scipy.linalg as sla

from .baecore import ErrorSample, sample_error
from .formats import atomic_write_bytes
from .priors import (GaussianFieldPrior, SigmoidFieldPrior, build_graph_laplacian,
                     draw_sigmoid_prior, field_rng)
from .spotlight import Projector, empty_projector, projector_from_error_sample

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------- meshes

@dataclass
class DiskMesh:
    """Triangulated (possibly deformed) disk.

    ``boundary`` lists the boundary nodes counter-clockwise and
    ``boundary_theta`` their polar angles on the unit disk; both survive
    deformation, which is how electrodes stay attached to the same edges.
    """

    nodes: np.ndarray
    tris: np.ndarray
    boundary: np.ndarray
    boundary_theta: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.tris.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.tris]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.tris].mean(axis=1)

    def element_pairs(self) -> np.ndarray:
        """Pairs of elements sharing an edge."""
        return _shared_edge_pairs(self.tris)


def _ring_triangles(inner: np.ndarray, a_in: np.ndarray, outer: np.ndarray, a_out: np.ndarray):
    """Triangulate the band between two closed rings by merging their angles."""
    n_in, n_out = len(inner), len(outer)
    if n_in == 1:
        return [(inner[0], outer[j], outer[(j + 1) % n_out]) for j in range(n_out)]
    # unwrap so both rings start at the same reference and run one full turn
    t_in = np.concatenate([a_in, a_in[:1] + TWO_PI])
    t_out = np.concatenate([a_out, a_out[:1] + TWO_PI])
    tris = []
    i = j = 0
    while i < n_in or j < n_out:
        advance_out = i == n_in or (j < n_out and t_out[j + 1] <= t_in[i + 1])
        if advance_out:
            tris.append((inner[i % n_in], outer[j % n_out], outer[(j + 1) % n_out]))
            j += 1
        else:
            tris.append((inner[i % n_in], outer[j % n_out], inner[(i + 1) % n_in]))
            i += 1
    return tris


def unit_disk_mesh(refinement: int, base_boundary: int = 16) -> DiskMesh:
    """Quasi-uniform triangulation of the unit disk by concentric rings.

    The boundary carries ``base_boundary * 2**(refinement - 1)`` equally
    spaced nodes starting at angle 0, so the node count grows about
    fourfold per level.
    """
    if refinement < 1:
        raise ValueError("refinement must be >= 1")
    if base_boundary < 6:
        raise ValueError("base_boundary must be >= 6")
    n_b = base_boundary * 2 ** (refinement - 1)
    n_rings = max(1, round(n_b / TWO_PI))
    coords = [np.zeros((1, 2))]
    rings, angles = [np.array([0])], [np.zeros(1)]
    count = 1
    for k in range(1, n_rings + 1):
        n_k = n_b if k == n_rings else max(6, round(n_b * k / n_rings))
        offset = 0.0 if k == n_rings else (k % 2) * math.pi / n_k
        theta = offset + TWO_PI * np.arange(n_k) / n_k
        coords.append(np.column_stack([np.cos(theta), np.sin(theta)]) * (k / n_rings))
        rings.append(np.arange(count, count + n_k))
        angles.append(theta)
        count += n_k
    nodes = np.vstack(coords)
    tris = []
    for k in range(n_rings):
        tris += _ring_triangles(rings[k], angles[k], rings[k + 1], angles[k + 1])
    tris = np.array(tris, dtype=np.int64)
    mesh = DiskMesh(nodes, tris, rings[-1].copy(), angles[-1].copy())
    flip = mesh.signed_areas() < 0
    mesh.tris[flip] = mesh.tris[flip][:, [0, 2, 1]]
    return mesh


def _shared_edge_pairs(tris: np.ndarray) -> np.ndarray:
    E = tris.shape[0]
    edges = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(E), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e_sorted, o_sorted = edges[order], owner[order]
    same = np.all(e_sorted[1:] == e_sorted[:-1], axis=1)
    return np.column_stack([o_sorted[:-1][same], o_sorted[1:][same]])


# ---------------------------------------------------------------- shapes

@dataclass(frozen=True)
class ShapeParams:
    """Radial map ``rho = r (1 + a_c cos 3t + a_s sin 3t)`` then ``x *= x_scale``."""

    a_c: float = 0.0
    a_s: float = 0.0
    x_scale: float = 1.0

    def __post_init__(self):
        if abs(self.a_c) + abs(self.a_s) >= 1:
            raise ValueError("|a_c| + |a_s| must be < 1")
        if self.x_scale <= 0:
            raise ValueError("x_scale must be positive")


STANDARD_SHAPE = ShapeParams(0.05, 0.0, 1.1)


def draw_random_shape(seed: int, x_scale: float = 1.1) -> ShapeParams:
    """``a_c = 0.1 xi``, ``a_s = 0.1 (nu - 1/2)`` with ``xi, nu`` uniform on [0, 1]."""
    xi, nu = field_rng(seed).uniform(size=2)
    return ShapeParams(0.1 * xi, 0.1 * (nu - 0.5), x_scale)


def deform_mesh(mesh: DiskMesh, shape: ShapeParams) -> DiskMesh:
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    theta = np.arctan2(y, x)
    factor = 1.0 + shape.a_c * np.cos(3 * theta) + shape.a_s * np.sin(3 * theta)
    nodes = np.column_stack([shape.x_scale * factor * x, factor * y])
    out = replace(mesh, nodes=nodes)
    if np.any(out.signed_areas() <= 0):
        raise ValueError("deformation inverts at least one element")
    return out


# ---------------------------------------------------------------- electrodes

@dataclass(frozen=True)
class Electrodes:
    """``n`` equal arcs centred at ``2 pi l / n`` covering ``coverage`` of the boundary."""

    n: int = 32
    coverage: float = 0.5
    z: float = 0.01

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least 2 electrodes")
        if not 0 < self.coverage < 1:
            raise ValueError("coverage must lie in (0, 1)")
        if self.z <= 0:
            raise ValueError("contact impedance must be positive")

    @property
    def half_width(self) -> float:
        return math.pi * self.coverage / self.n

    @property
    def centers(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n) / self.n

    def impedances(self) -> np.ndarray:
        return np.full(self.n, float(self.z))


def electrode_edges(mesh: DiskMesh, electrodes: Electrodes) -> list:
    """Boundary edges (node pairs) under each electrode, found on the unit-disk angles."""
    b, th = mesh.boundary, mesh.boundary_theta
    nb = len(b)
    dth = np.diff(np.concatenate([th, th[:1] + TWO_PI]))
    mid = th + 0.5 * dth
    hw = electrodes.half_width
    per_edge = TWO_PI / nb
    expected = 2 * hw / per_edge
    if abs(expected - round(expected)) > 1e-9 or round(expected) < 1:
        raise ValueError(f"{nb} boundary nodes do not resolve electrode arcs of {electrodes.n} electrodes")
    out = []
    for c in electrodes.centers:
        off = np.angle(np.exp(1j * (mid - c)))
        idx = np.flatnonzero(np.abs(off) < hw)
        if len(idx) != round(expected):
            raise ValueError("electrode arc endpoints do not fall on boundary nodes")
        out.append(np.column_stack([b[idx], b[(idx + 1) % nb]]))
    return out


# ---------------------------------------------------------------- current frame

@dataclass
class CurrentFrame:
    patterns: np.ndarray

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=np.float64)
        if np.abs(self.patterns.sum(axis=0)).max() > 1e-12:
            raise ValueError("current patterns must sum to zero")

    @property
    def n_electrodes(self) -> int:
        return self.patterns.shape[0]

    @property
    def n_patterns(self) -> int:
        return self.patterns.shape[1]


def pairwise_frame(n: int) -> CurrentFrame:
    """Patterns ``e_k - e_n`` for ``k = 1 .. n-1``."""
    I = np.zeros((n, n - 1))
    I[np.arange(n - 1), np.arange(n - 1)] = 1.0
    I[n - 1, :] = -1.0
    return CurrentFrame(I)


# ---------------------------------------------------------------- forward solver

def _p1_gradients(mesh: DiskMesh):
    p = mesh.nodes[mesh.tris]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    nxt, prv = p[:, [1, 2, 0]], p[:, [2, 0, 1]]
    grads = np.stack([nxt[..., 1] - prv[..., 1], prv[..., 0] - nxt[..., 0]], axis=-1) / det[:, None, None]
    return 0.5 * det, grads


def _gauge_basis(n: int) -> np.ndarray:
    """Columns ``e_1 - e_{k+1}``: a basis of zero-sum electrode voltages."""
    N = np.zeros((n, n - 1))
    N[0, :] = 1.0
    N[np.arange(1, n), np.arange(n - 1)] = -1.0
    return N


@dataclass
class CEMSolution:
    """Nodal potentials ``u`` (nodes x patterns) and electrode voltages ``U`` (L x patterns)."""

    u: np.ndarray
    U: np.ndarray

    @property
    def V(self) -> np.ndarray:
        """Stacked pattern-major: all electrodes of pattern 1, then pattern 2, ..."""
        return self.U.T.ravel()


class CEMModel:
    """FEM discretisation of the complete electrode model on one mesh."""

    def __init__(self, mesh: DiskMesh, electrodes: Electrodes, frame: CurrentFrame):
        if frame.n_electrodes != electrodes.n:
            raise ValueError("current frame and electrodes disagree on L")
        self.mesh, self.electrodes, self.frame = mesh, electrodes, frame
        self.areas, self.grads = _p1_gradients(mesh)
        if np.any(self.areas <= 0):
            raise ValueError("mesh has non-positively oriented elements")
        self.N = _gauge_basis(electrodes.n)
        self._boundary = self._electrode_blocks(electrode_edges(mesh, electrodes))

    @property
    def m(self) -> int:
        return self.electrodes.n * self.frame.n_patterns

    def _electrode_blocks(self, edges):
        nn, L = self.mesh.n_nodes, self.electrodes.n
        zinv = 1.0 / self.electrodes.impedances()
        rows, cols, vals = [], [], []
        C = np.zeros((nn, L))
        D = np.zeros(L)
        for l, e in enumerate(edges):
            h = np.linalg.norm(self.mesh.nodes[e[:, 1]] - self.mesh.nodes[e[:, 0]], axis=1)
            loc = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
            for a in range(2):
                for c in range(2):
                    rows.append(e[:, a])
                    cols.append(e[:, c])
                    vals.append(zinv[l] * h * loc[a, c])
            np.add.at(C[:, l], e[:, 0], 0.5 * h * zinv[l])
            np.add.at(C[:, l], e[:, 1], 0.5 * h * zinv[l])
            D[l] = zinv[l] * h.sum()
        M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nn, nn)).tocsr()
        CN = sp.csr_matrix(C @ self.N)
        return M, CN, self.N.T @ np.diag(D) @ self.N

    def stiffness(self, sigma) -> sp.csr_matrix:
        sigma = np.asarray(sigma, dtype=np.float64)
        ke = np.einsum("e,eid,ejd->eij", sigma * self.areas, self.grads, self.grads)
        t = self.mesh.tris
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        nn = self.mesh.n_nodes
        return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(nn, nn)).tocsr()

    def system(self, sigma) -> sp.csc_matrix:
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.shape != (self.mesh.n_elements,):
            raise ValueError("one conductivity value per element is required")
        if not np.all(sigma > 0):
            raise ValueError("conductivity must be positive")
        M, CN, G = self._boundary
        return sp.bmat([[self.stiffness(sigma) + M, -CN], [-CN.T, sp.csr_matrix(G)]], format="csc")

    def _factor(self, sigma):
        try:
            lu = spla.splu(self.system(sigma))
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(f"CEM system is singular: {exc}") from exc
        return lu

    def _solve(self, lu, currents: np.ndarray):
        nn = self.mesh.n_nodes
        rhs = np.zeros((nn + self.electrodes.n - 1, currents.shape[1]))
        rhs[nn:] = self.N.T @ currents
        y = lu.solve(rhs)
        return y[:nn], self.N @ y[nn:]

    def forward(self, sigma) -> CEMSolution:
        u, U = self._solve(self._factor(sigma), self.frame.patterns)
        return CEMSolution(u, U)

    def jacobian(self, sigma) -> np.ndarray:
        """``dV / dx`` for ``sigma = sigma_0 exp(x)``, rows ordered like ``V``."""
        sigma = np.asarray(sigma, dtype=np.float64)
        lu = self._factor(sigma)
        u, _ = self._solve(lu, self.frame.patterns)
        # adjoint fields: measuring electrode l is driven with unit current
        w, _ = self._solve(lu, np.eye(self.electrodes.n))
        t = self.mesh.tris
        gu = np.einsum("eid,eik->ked", self.grads, u[t])
        gw = np.einsum("eid,eil->led", self.grads, w[t])
        J = -np.einsum("ked,led->kle", gu, gw) * (sigma * self.areas)
        return J.reshape(self.m, -1)


def cem_forward(mesh: DiskMesh, sigma, electrodes: Electrodes, frame: CurrentFrame) -> CEMSolution:
    return CEMModel(mesh, electrodes, frame).forward(sigma)


def cem_jacobian(mesh: DiskMesh, sigma, electrodes: Electrodes, frame: CurrentFrame) -> np.ndarray:
    return CEMModel(mesh, electrodes, frame).jacobian(sigma)


def frame_response(sol: CEMSolution, frame: CurrentFrame) -> np.ndarray:
    """``R_ij = I_i^T U_j``; symmetric for a reciprocal network."""
    return frame.patterns.T @ sol.U


# ---------------------------------------------------------------- priors and error sample

def free_elements(mesh: DiskMesh, fixed_radius: float = 0.9) -> np.ndarray:
    """Elements of the unit-disk mesh whose centroid lies inside ``fixed_radius``."""
    return np.flatnonzero(np.linalg.norm(mesh.centroids(), axis=1) < fixed_radius)


def element_laplacian(mesh: DiskMesh, elements: np.ndarray) -> sp.csr_matrix:
    """Graph Laplacian of the given elements, edges between elements sharing a side."""
    pos = -np.ones(mesh.n_elements, dtype=np.int64)
    pos[elements] = np.arange(len(elements))
    pairs = pos[mesh.element_pairs()]
    pairs = pairs[np.all(pairs >= 0, axis=1)]
    return build_graph_laplacian(pairs, len(elements))


def eit_prior(mesh: DiskMesh, free: np.ndarray, lam: float = 5.0, xi0: float = 0.0,
              alpha: float = 3.0, gamma: float = 5.0) -> SigmoidFieldPrior:
    return SigmoidFieldPrior(GaussianFieldPrior(element_laplacian(mesh, free), lam), xi0, alpha, gamma)


def embed_conductivity(values, free: np.ndarray, n_elements: int, background: float = 1.0) -> np.ndarray:
    sigma = np.full(n_elements, float(background))
    sigma[free] = values
    return sigma


def eit_error_sample(L_draws: int, seed: int, prior: SigmoidFieldPrior, electrodes: Electrodes,
                     frame: CurrentFrame, ref_shape: ShapeParams, mesh: DiskMesh,
                     free: np.ndarray, background: float = 1.0, workers: int = 1) -> ErrorSample:
    """Draws ``F_w(sigma) - F_ref(sigma)`` over random shapes ``w`` and prior conductivities.

    ``mesh`` is the unit-disk mesh; ``free`` its elements carrying the prior
    (the remaining annulus is held at ``background``). The shape for draw
    ``j`` comes from ``draw_random_shape(seed + j)`` and the conductivity
    from the prior with the same derived seed.
    """
    ref_model = CEMModel(deform_mesh(mesh, ref_shape), electrodes, frame)

    def joint(s):
        sigma = embed_conductivity(draw_sigmoid_prior(prior, 1, s)[:, 0], free, mesh.n_elements, background)
        return (draw_random_shape(s, ref_shape.x_scale), sigma), sigma

    def f_star(pair):
        shape, sigma = pair
        return cem_forward(deform_mesh(mesh, shape), sigma, electrodes, frame).V

    return sample_error(f_star, lambda s: ref_model.forward(s).V, joint, L_draws, seed,
                        workers=workers, description="eit boundary-shape error, sigmoid field prior")


# ---------------------------------------------------------------- reconstruction

@dataclass
class GNHistory:
    misfit: list = field(default_factory=list)
    step_norm: list = field(default_factory=list)


def gauss_newton_eit(V_data, proj: Projector, mu, mesh: DiskMesh, electrodes: Electrodes,
                     frame: CurrentFrame, reg_lambda: float = 5.0, delta: float = 1.0,
                     n_iter: int = 3, free: np.ndarray | None = None, sigma_fixed=None,
                     sigma0: float = 1.0, x0=None, history: GNHistory | None = None) -> np.ndarray:
    """Projected Gauss-Newton for the log-conductivity of the free elements.

    Each step minimises ``|P_perp (V - mu - G(x_c) - J dx)|^2
    + delta |Lw (x_c + dx)|^2`` with ``Lw`` the element graph Laplacian
    plus ``reg_lambda^-2 I``, where ``sigma = sigma0 exp(x)`` on the free
    elements and ``sigma_fixed`` elsewhere.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    model = CEMModel(mesh, electrodes, frame)
    free = np.arange(mesh.n_elements) if free is None else np.asarray(free)
    base = np.full(mesh.n_elements, sigma0) if sigma_fixed is None else np.asarray(sigma_fixed, dtype=np.float64)
    V_data = np.asarray(V_data, dtype=np.float64)
    mu = np.zeros_like(V_data) if mu is None else np.asarray(mu, dtype=np.float64)
    if proj.m != V_data.size:
        raise ValueError("projector and data dimensions disagree")
    Lw = (element_laplacian(mesh, free) + sp.identity(len(free)) / reg_lambda**2).toarray()
    R = delta * (Lw.T @ Lw)
    x = np.zeros(len(free)) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    U = proj.U

    def project_rows(M):
        return M - U @ (U.T @ M)

    for _ in range(n_iter):
        sigma = base.copy()
        sigma[free] = sigma0 * np.exp(x)
        r = project_rows(V_data - mu - model.forward(sigma).V)
        A = project_rows(model.jacobian(sigma)[:, free])
        H = A.T @ A + R
        g = A.T @ r - R @ x
        try:
            dx = sla.cho_solve(sla.cho_factor(H), g)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("Gauss-Newton normal equations are singular") from exc
        x = x + dx
        if history is not None:
            history.misfit.append(float(np.linalg.norm(r)))
            history.step_norm.append(float(np.linalg.norm(dx)))
    return x


# ---------------------------------------------------------------- desk-scale experiment

def smooth_inclusion(points, center=(0.3, 0.2), radius: float = 0.3, width: float = 0.04,
                     sigma0: float = 1.0, sigma1: float = 3.0) -> np.ndarray:
    """Background ``sigma0`` with a disc of ``sigma1`` whose rim is blended over ``width``."""
    d = np.linalg.norm(np.asarray(points) - np.asarray(center), axis=1)
    return sigma0 + (sigma1 - sigma0) * 0.5 * (1.0 + np.tanh((radius - d) / width))


@dataclass
class EITSetup:
    n_electrodes: int = 32
    coverage: float = 0.5
    z: float = 0.01
    base_boundary: int = 16
    refinement: int = 4
    # a finer data mesh adds discretisation error several times the noise,
    # which the shape-only error sample does not model
    data_refinement: int = 4
    fixed_radius: float = 0.9
    prior_lambda: float = 5.0
    prior_xi0: float = 0.0
    prior_alpha: float = 3.0
    prior_gamma: float = 5.0
    n_draws: int = 5
    noise_rel: float = 1e-3
    # unweighted voltage misfit: 1e-2 balances it against the penalty at 0.1% noise
    delta: float = 1e-2
    n_iter: int = 3
    data_seed: int = 1
    sample_seed: int = 500
    sigma0: float = 1.0
    sigma1: float = 3.0


def simulate_eit_data(setup: EITSetup, shape: ShapeParams, electrodes: Electrodes, frame: CurrentFrame):
    """Noisy voltages from the inclusion phantom on the data mesh deformed by ``shape``."""
    fine = unit_disk_mesh(setup.data_refinement, setup.base_boundary)
    sigma = smooth_inclusion(fine.centroids(), sigma0=setup.sigma0, sigma1=setup.sigma1)
    sigma[np.linalg.norm(fine.centroids(), axis=1) >= setup.fixed_radius] = setup.sigma0
    V = cem_forward(deform_mesh(fine, shape), sigma, electrodes, frame).V
    std = setup.noise_rel * float(V.max() - V.min())
    # the shape uses data_seed; offset keeps the noise stream distinct
    noise = field_rng(setup.data_seed + 7919).standard_normal(V.size) * std
    return V + noise, std


def conductivity_error(sigma, truth, areas, idx) -> float:
    """Area-weighted relative L2 error over the elements ``idx``."""
    w = areas[idx]
    diff = np.sum(w * (sigma[idx] - truth[idx]) ** 2)
    return float(math.sqrt(diff / np.sum(w * truth[idx] ** 2)))


def run_eit_benchmark(setup: EITSetup, workers: int = 1) -> dict:
    """Projected versus unprojected reconstruction on the reference shape."""
    electrodes = Electrodes(setup.n_electrodes, setup.coverage, setup.z)
    frame = pairwise_frame(setup.n_electrodes)
    unit = unit_disk_mesh(setup.refinement, setup.base_boundary)
    free = free_elements(unit, setup.fixed_radius)
    true_shape = draw_random_shape(setup.data_seed)
    V, std = simulate_eit_data(setup, true_shape, electrodes, frame)

    prior = eit_prior(unit, free, setup.prior_lambda, setup.prior_xi0, setup.prior_alpha, setup.prior_gamma)
    sample = eit_error_sample(setup.n_draws, setup.sample_seed, prior, electrodes, frame,
                              STANDARD_SHAPE, unit, free, setup.sigma0, workers)
    # centred draws span at most n_draws - 1 directions
    proj, cdiag = projector_from_error_sample(sample, max(1, setup.n_draws - 1))
    mu = sample.draws.mean(axis=1)

    ref_mesh = deform_mesh(unit, STANDARD_SHAPE)
    truth = smooth_inclusion(unit.centroids(), sigma0=setup.sigma0, sigma1=setup.sigma1)
    truth[np.setdiff1d(np.arange(unit.n_elements), free)] = setup.sigma0
    areas = unit.signed_areas()
    common = dict(mesh=ref_mesh, electrodes=electrodes, frame=frame, reg_lambda=setup.prior_lambda,
                  delta=setup.delta, n_iter=setup.n_iter, free=free, sigma0=setup.sigma0)
    out = {"true_shape": true_shape, "noise_std": std, "sample": sample, "projector": proj,
           "clutter": cdiag, "truth": truth, "free": free, "data": V}
    for name, p, m in (("projected", proj, mu), ("unprojected", empty_projector(V.size), None)):
        x = gauss_newton_eit(V, p, m, **common)
        sigma = embed_conductivity(setup.sigma0 * np.exp(x), free, unit.n_elements, setup.sigma0)
        out[name] = (sigma, conductivity_error(sigma, truth, areas, free))
    return out


# ---------------------------------------------------------------- mesh files

def write_mesh(path, mesh: DiskMesh, electrodes: Electrodes | None = None) -> None:
    """Text mesh: NODES, ELEMENTS and (optionally) ELECTRODES sections."""
    lines = ["NODES"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    lines.append("ELEMENTS")
    lines += [f"{i} {a} {b} {c}" for i, (a, b, c) in enumerate(mesh.tris.tolist())]
    lines.append("BOUNDARY")
    lines += [f"{n} {t!r}" for n, t in zip(mesh.boundary.tolist(), mesh.boundary_theta.tolist())]
    if electrodes is not None:
        lines.append("ELECTRODES")
        for l, e in enumerate(electrode_edges(mesh, electrodes)):
            lines.append(f"{l} " + " ".join(f"{a}-{b}" for a, b in e.tolist()))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_mesh(path):
    """Returns ``(mesh, edges)``; ``edges`` is the electrode edge list or ``None``."""
    sections: dict = {}
    current = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.isalpha():
            current = sections.setdefault(line, [])
            continue
        if current is None:
            raise ValueError("mesh file must start with a section name")
        current.append(line.split())
    nodes = np.array([[float(v) for v in row[1:3]] for row in sections["NODES"]])
    tris = np.array([[int(v) for v in row[1:4]] for row in sections["ELEMENTS"]], dtype=np.int64)
    bnd = sections.get("BOUNDARY", [])
    mesh = DiskMesh(nodes, tris, np.array([int(r[0]) for r in bnd], dtype=np.int64),
                    np.array([float(r[1]) for r in bnd]))
    edges = None
    if "ELECTRODES" in sections:
        edges = [np.array([[int(t) for t in p.split("-")] for p in row[1:]], dtype=np.int64)
                 for row in sections["ELECTRODES"]]
    return mesh, edges
