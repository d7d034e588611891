"""Second variation, Morse index and the index comparison and energy bound checks."""
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cmcdisk.energy import dirichlet, energy_gradient, jacobian_normals, offset_of_map
from cmcdisk.errors import BranchingError, EigenSolverError, FrameError
from cmcdisk.mesh import (boundary_integrate, boundary_lumped_length, centroid_values, lumped_mass,
                          stiffness_matrix)

logger = logging.getLogger(__name__)

DENSE_LIMIT = 3000
DEFAULT_EIGEN_COUNT = 12
DEFAULT_ZERO_BAND = 1.0
DEFAULT_BRANCH_TOL = 1e-3
MAX_BRANCH_FRACTION = 0.1


@dataclass
class HessianSystem:
    """Pencil ``(A, M)`` on reduced coordinates; ``P`` embeds them as nodal vectors."""
    A: sp.spmatrix
    M: sp.spmatrix
    P: sp.spmatrix = None
    mesh_size: float = 0.0
    components: int = 3

    @property
    def dof_count(self):
        return self.A.shape[0]

    def embed(self, x):
        full = x if self.P is None else self.P @ x
        return np.asarray(full).reshape(-1, self.components)

    def restrict(self, nodal):
        flat = np.asarray(nodal, dtype=float).ravel()
        return flat if self.P is None else self.P.T @ flat

    def quadratic_form(self, x):
        return float(x @ (self.A @ x))


@dataclass
class SpectralReport:
    eigenvalues: np.ndarray
    index: int
    nullity: int
    index_tol: float
    dof_count: int
    eigenvectors: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            'eigenvalues': [float(v) for v in self.eigenvalues],
            'index': self.index,
            'nullity': self.nullity,
            'index_tol': self.index_tol,
            'dof_count': self.dof_count,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class NormalField:
    normals: np.ndarray
    branch_mask: np.ndarray

    @property
    def branched(self):
        return np.flatnonzero(self.branch_mask)


def tangent_frames(u, rotation=0.0):
    """Orthonormal tangent pairs at the boundary vertices, one row per loop position."""
    mesh = u.mesh
    b = mesh.boundary_loop
    eta = u.surface.normal(u.positions[b])
    along = u.positions[np.roll(b, -1)] - u.positions[np.roll(b, 1)]
    t1 = along - np.sum(along * eta, axis=1)[:, None] * eta
    length = np.linalg.norm(t1, axis=1)
    if length.min() < 1e-14:
        raise FrameError(f'degenerate tangent frame at boundary vertex {b[np.argmin(length)]}')
    t1 /= length[:, None]
    t2 = np.cross(eta, t1)
    c, s = np.cos(rotation), np.sin(rotation)
    return np.stack([c * t1 + s * t2, -s * t1 + c * t2], axis=1)


def reduction_matrix(u, frames=None):
    """Sparse embedding of interior (3 DOF) and boundary (2 DOF) coordinates into nodal R^3."""
    mesh = u.mesh
    if frames is None:
        frames = tangent_frames(u)
    interior = mesh.interior
    b = mesh.boundary_loop
    rows, cols, vals = [], [], []
    for k in range(3):
        rows.append(3 * interior + k)
        cols.append(3 * np.arange(len(interior)) + k)
        vals.append(np.ones(len(interior)))
    offset = 3 * len(interior)
    for a in range(2):
        for k in range(3):
            rows.append(3 * b + k)
            cols.append(offset + 2 * np.arange(len(b)) + a)
            vals.append(frames[:, a, k])
    n_dof = offset + 2 * len(b)
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(3 * mesh.n_vertices, n_dof)).tocsr()


def _block_matrix(mesh, blocks):
    """Scatter per-triangle (3, 3, 3, 3) blocks ``[t, i, j, k, l]`` into a nodal 3V x 3V matrix."""
    tri = mesh.triangles
    row = 3 * tri[:, :, None, None, None] + np.arange(3)[None, None, None, :, None]
    col = 3 * tri[:, None, :, None, None] + np.arange(3)[None, None, None, None, :]
    row, col = np.broadcast_arrays(row, col, blocks)[:2]
    n = 3 * mesh.n_vertices
    return sp.coo_matrix((blocks.ravel(), (row.ravel(), col.ravel())), shape=(n, n)).tocsr()


def _cross_matrix(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _boundary_curvature_block(u, g):
    """``<g_b, eta> Hess(phi) / |grad phi|`` at each boundary vertex."""
    q = u.positions[u.mesh.boundary_loop]
    eta = u.surface.normal(q)
    scale = np.sum(g[u.mesh.boundary_loop] * eta, axis=1) / np.linalg.norm(u.surface.grad(q), axis=1)
    return scale[:, None, None] * u.surface.hessian(q)


def nodal_hessian(u, params, symmetric=True):
    """Full 3V x 3V matrix of the second variation before boundary reduction."""
    mesh = u.mesh
    G = u.gradient()
    basis = mesh.grad_basis
    area = mesh.tri_area
    s = np.sum(G * G, axis=(1, 2))
    c = params.coupling
    weight = 1.0 + c * (1.0 + s) ** (0.5 * params.p - 1.0)
    curvature = c * (params.p - 2.0) * (1.0 + s) ** (0.5 * params.p - 2.0)
    Gb = np.einsum('tka,tia->tik', G, basis)
    blocks = (area * weight)[:, None, None, None, None] * (
        np.einsum('tia,tja->tij', basis, basis)[..., None, None] * np.eye(3))
    blocks += (area * curvature)[:, None, None, None, None] * np.einsum('tik,tjl->tijkl', Gb, Gb)

    centroids = centroid_values(mesh, u.positions)
    f = params.f(centroids)
    grad_f = params.f.gradient(centroids)
    J = jacobian_normals(G)
    # derivative of u_x1 x u_x2 with respect to the vertex j values
    C = (basis[:, :, 1, None, None] * _cross_matrix(G[..., 0])[:, None]
         - basis[:, :, 0, None, None] * _cross_matrix(G[..., 1])[:, None])
    volume = (area * f / 3.0)[:, None, None, None] * C
    volume = volume + (area / 9.0)[:, None, None, None] * np.einsum('tk,tl->tkl', J, grad_f)[:, None]
    volume = np.broadcast_to(volume[:, None], blocks.shape)
    blocks = blocks + volume
    A = _block_matrix(mesh, blocks)

    g = energy_gradient(u, params)
    b = mesh.boundary_loop
    rows = 3 * b[:, None, None] + np.arange(3)[None, :, None]
    cols = 3 * b[:, None, None] + np.arange(3)[None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    A = A + sp.coo_matrix((_boundary_curvature_block(u, g).ravel(), (rows.ravel(), cols.ravel())),
                          shape=A.shape).tocsr()
    if symmetric:
        A = 0.5 * (A + A.T)
    return A.tocsr()


def assemble_second_variation(u, params, frames=None, symmetric=True):
    mesh = u.mesh
    P = reduction_matrix(u, frames)
    A = (P.T @ nodal_hessian(u, params, symmetric) @ P).tocsr()
    if symmetric:
        A = 0.5 * (A + A.T)
    mass = sp.diags(np.repeat(lumped_mass(mesh), 3))
    M = (P.T @ mass @ P).tocsr()
    M = sp.diags(M.diagonal()).tocsr()
    return HessianSystem(A, M, P, mesh.mesh_size_h)


def _gershgorin_lower_bound(A, M):
    A = sp.csr_matrix(A)
    diag = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(diag)
    return float(np.min((diag - off) / M.diagonal()))


def morse_index(system, k=DEFAULT_EIGEN_COUNT, index_tol=None, zero_band=DEFAULT_ZERO_BAND,
                return_vectors=False):
    A, M = sp.csr_matrix(system.A), sp.csr_matrix(system.M)
    n = system.dof_count
    k = min(k, n)
    norm_a = float(spla.norm(A, np.inf)) if A.nnz else 0.0
    if index_tol is None:
        index_tol = 1e-8 * norm_a + zero_band * system.mesh_size ** 2
    if n <= DENSE_LIMIT:
        values, vectors = scipy.linalg.eigh(A.toarray(), M.toarray(), subset_by_index=[0, k - 1])
    else:
        sigma = _gershgorin_lower_bound(A, M) - 1.0
        try:
            values, vectors = spla.eigsh(A, k=k, M=M, sigma=sigma, which='LM')
        except spla.ArpackNoConvergence as e:
            raise EigenSolverError(f'eigensolver did not converge: {e}') from e
        order = np.argsort(values)
        values, vectors = values[order], vectors[:, order]
        # eigsh returns M-orthonormal vectors up to scaling
        vectors /= np.sqrt(np.einsum('ij,ij->j', vectors, M @ vectors))
    residuals = np.linalg.norm(A @ vectors - (M @ vectors) * values, axis=0)
    limit = 1e-8 * max(1.0, norm_a)
    if residuals.size and residuals.max() > limit:
        raise EigenSolverError(f'eigenpair residual {residuals.max():.3e} above {limit:.3e}')
    index = int(np.sum(values < -index_tol))
    nullity = int(np.sum(np.abs(values) <= index_tol))
    logger.debug('spectrum of %d dofs: index %d nullity %d (tol %.3g)', n, index, nullity, index_tol)
    return SpectralReport(values, index, nullity, float(index_tol), n,
                          vectors if return_vectors else None)


def normal_field(u, branch_tol=DEFAULT_BRANCH_TOL):
    J = jacobian_normals(u.gradient())
    size = np.linalg.norm(J, axis=1)
    mean = size.mean()
    if mean <= 0.0:
        raise BranchingError('every triangle is branched; the map is constant')
    mask = size < branch_tol * mean
    normals = np.zeros_like(J)
    normals[~mask] = J[~mask] / size[~mask, None]
    return NormalField(normals, mask)


def boundary_normals(u, field_):
    """Unit normals at boundary vertices, averaged from adjacent triangles and made tangent to the surface."""
    mesh = u.mesh
    acc = np.zeros((mesh.n_vertices, 3))
    np.add.at(acc, mesh.triangles, (mesh.tri_area[:, None] * field_.normals)[:, None, :])
    b = mesh.boundary_loop
    n = acc[b]
    eta = u.surface.normal(u.positions[b])
    n -= np.sum(n * eta, axis=1)[:, None] * eta
    return n / np.linalg.norm(n, axis=1)[:, None]


def boundary_conormal(u):
    """Discrete Dirichlet conormal derivative ``u_r`` at each boundary vertex."""
    b = u.mesh.boundary_loop
    return (stiffness_matrix(u.mesh) @ u.positions)[b] / boundary_lumped_length(u.mesh)[:, None]


def boundary_curvature(u, field_=None):
    """``A^{u_r}(n, n)`` at each boundary vertex."""
    field_ = normal_field(u) if field_ is None else field_
    n = boundary_normals(u, field_)
    b = u.mesh.boundary_loop
    return u.surface.second_fundamental_form(u.positions[b], boundary_conormal(u), n)


def area_index_form(u, H, branch_tol=DEFAULT_BRANCH_TOL):
    mesh = u.mesh
    field_ = normal_field(u, branch_tol)
    fraction = field_.branch_mask.mean()
    if fraction >= MAX_BRANCH_FRACTION:
        raise BranchingError(f'{100 * fraction:.1f}% of triangles are branched')
    G = u.gradient()
    s = np.sum(G * G, axis=(1, 2))
    potential = np.where(field_.branch_mask, 0.0, mesh.tri_area * 0.5 * s * 0.5 * H ** 2 / 9.0)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_vertices
    A = stiffness_matrix(mesh) - sp.coo_matrix((np.repeat(potential, 9), (rows, cols)), shape=(n, n))
    kappa = boundary_curvature(u, field_)
    edges = mesh.boundary_edges
    edge_kappa = 0.5 * (kappa + np.roll(kappa, -1))
    weight = np.repeat(mesh.edge_len * edge_kappa / 4.0, 4)
    erows = np.repeat(edges, 2, axis=1).ravel()
    ecols = np.tile(edges, (1, 2)).ravel()
    A = A + sp.coo_matrix((weight, (erows, ecols)), shape=(n, n))
    A = A.tocsr()
    A = 0.5 * (A + A.T)
    return HessianSystem(A.tocsr(), sp.diags(lumped_mass(mesh)).tocsr(), None,
                         mesh.mesh_size_h, components=1)


def index_comparison_check(u, params, k=DEFAULT_EIGEN_COUNT, zero_band=DEFAULT_ZERO_BAND):
    energy_report = morse_index(assemble_second_variation(u, params.with_epsilon(0.0)), k,
                                zero_band=zero_band)
    area_report = morse_index(area_index_form(u, params.H), k, zero_band=zero_band)
    passed = area_report.index <= energy_report.index
    logger.info('index comparison: area form %d, energy %d, %s',
                area_report.index, energy_report.index, 'pass' if passed else 'fail')
    return area_report.index, energy_report.index, passed


def hersch_bound_check(u, H, mesh_tol_constant=10.0):
    mesh_tol = mesh_tol_constant * u.mesh.mesh_size_h ** 2
    D = dirichlet(u)
    bound = 16.0 * np.pi / H ** 2
    boundary_term = float(boundary_integrate(u.mesh, _edge_average(boundary_curvature(u))))
    confined = float(offset_of_map(u, u.surface).max()) <= mesh_tol
    result = {
        'D': D,
        'bound': bound,
        'margin': bound - D,
        'pass': bool(D <= bound + mesh_tol),
        'sharper_bound': (16.0 * np.pi + 2.0 * boundary_term) / H ** 2,
        'confined': confined,
    }
    if not confined:
        logger.warning('map leaves the constraint region; the energy bound does not apply')
    return result


def _edge_average(vertex_values):
    return 0.5 * (vertex_values + np.roll(vertex_values, -1))


def eigenvector_fields(system, report):
    if report.eigenvectors is None:
        return []
    return [system.embed(report.eigenvectors[:, j]) for j in range(report.eigenvectors.shape[1])]
