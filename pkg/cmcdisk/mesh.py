"""P1 triangulation of the closed unit disk.

The base mesh is a fan of eight triangles around the origin. Each refinement
splits every triangle into four through its edge midpoints; midpoints of
boundary edges are pushed back onto the unit circle so the boundary loop
stays exactly on the circle.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from cmcdisk.errors import MeshError

logger = logging.getLogger(__name__)

BASE_BOUNDARY_VERTICES = 8


@dataclass(frozen=True, eq=False)
class DiskMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_loop: np.ndarray
    level: int = 0
    tri_area: np.ndarray = field(init=False, repr=False)
    edge_len: np.ndarray = field(init=False, repr=False)
    mesh_size_h: float = field(init=False)
    grad_basis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.vertices[self.triangles]
        # e_i is the edge opposite vertex i, walked counterclockwise.
        e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        area = 0.5 * (e[:, 2, 0] * (-e[:, 1, 1]) - e[:, 2, 1] * (-e[:, 1, 0]))
        # grad(lambda_i) is the inward normal of the opposite edge over twice the area
        basis = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * area)[:, None, None]
        b = self.boundary_loop
        edge_len = np.linalg.norm(self.vertices[np.roll(b, -1)] - self.vertices[b], axis=1)
        lengths = np.linalg.norm(e, axis=-1)
        for name, value in (('tri_area', area), ('edge_len', edge_len),
                            ('mesh_size_h', float(lengths.max())), ('grad_basis', basis)):
            object.__setattr__(self, name, value)
        for arr in (self.vertices, self.triangles, self.boundary_loop,
                    self.tri_area, self.edge_len, self.grad_basis):
            arr.setflags(write=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def area(self):
        return integrate(self, np.ones(self.n_triangles))

    @property
    def boundary_length(self):
        return boundary_integrate(self, np.ones(len(self.boundary_loop)))

    @property
    def boundary_edges(self):
        b = self.boundary_loop
        return np.stack([b, np.roll(b, -1)], axis=1)

    @property
    def is_boundary(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_loop] = True
        return mask

    @property
    def interior(self):
        return np.flatnonzero(~self.is_boundary)

    def edges(self):
        t = self.triangles
        all_edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(all_edges, axis=1), axis=0)

    def euler_characteristic(self):
        return self.n_vertices - len(self.edges()) + self.n_triangles

    def centroids(self):
        return centroid_values(self, self.vertices)

    def __repr__(self):
        return '<DiskMesh level={} V={} T={} h={:.4g}>'.format(
            self.level, self.n_vertices, self.n_triangles, self.mesh_size_h)


def _base_mesh():
    n = BASE_BOUNDARY_VERTICES
    theta = 2.0 * np.pi * np.arange(n) / n
    vertices = np.vstack([[0.0, 0.0], np.column_stack([np.cos(theta), np.sin(theta)])])
    triangles = np.array([[0, 1 + k, 1 + (k + 1) % n] for k in range(n)])
    return DiskMesh(vertices, triangles, np.arange(1, n + 1), level=0)


def refine(mesh):
    """Split every triangle into four and re-project new boundary vertices."""
    vertices = [row for row in mesh.vertices]
    midpoint = {}

    def mid(i, j):
        key = (min(i, j), max(i, j))
        if key not in midpoint:
            midpoint[key] = len(vertices)
            vertices.append(0.5 * (mesh.vertices[i] + mesh.vertices[j]))
        return midpoint[key]

    triangles = []
    for a, b, c in mesh.triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        triangles.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]])

    loop = []
    for i, j in mesh.boundary_edges:
        loop.extend([i, midpoint[(min(i, j), max(i, j))]])
    vertices = np.array(vertices)
    new_boundary = np.array(loop)
    vertices[new_boundary] /= np.linalg.norm(vertices[new_boundary], axis=1)[:, None]
    return DiskMesh(vertices, np.array(triangles), new_boundary, level=mesh.level + 1)


def build_disk_mesh(refinement_level):
    if refinement_level < 0:
        raise MeshError(f'refinement level must be nonnegative, got {refinement_level}')
    mesh = _base_mesh()
    for _ in range(refinement_level):
        mesh = refine(mesh)
    logger.debug('built %r', mesh)
    return mesh


def _check_length(expected, values, what):
    values = np.asarray(values, dtype=float)
    if values.shape[0] != expected:
        raise MeshError(f'{what}: expected {expected} rows, got {values.shape[0]}')
    return values


def gradient(mesh, field):
    """Per-triangle constant gradient of a P1 field.

    Scalar fields give shape (T, 2); vector fields of shape (V, k) give (T, k, 2)
    with the last axis indexing the derivative direction x^1, x^2.
    """
    field = _check_length(mesh.n_vertices, field, 'gradient')
    return np.einsum('tia,ti...->t...a', mesh.grad_basis, field[mesh.triangles])


def centroid_values(mesh, field):
    field = _check_length(mesh.n_vertices, field, 'centroid_values')
    return field[mesh.triangles].mean(axis=1)


def integrate(mesh, values):
    """Centroid rule: sum of per-triangle values times triangle area."""
    values = _check_length(mesh.n_triangles, values, 'integrate')
    return np.tensordot(mesh.tri_area, values, axes=(0, 0))


def boundary_integrate(mesh, values):
    """Midpoint rule over the boundary loop; edge k joins loop[k] and loop[k+1]."""
    values = _check_length(len(mesh.boundary_loop), values, 'boundary_integrate')
    return np.tensordot(mesh.edge_len, values, axes=(0, 0))


def stiffness_matrix(mesh, weights=None):
    """P1 stiffness, optionally with a per-triangle coefficient."""
    w = mesh.tri_area if weights is None else mesh.tri_area * weights
    local = np.einsum('t,tia,tja->tij', w, mesh.grad_basis, mesh.grad_basis)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def lumped_mass(mesh):
    mass = np.zeros(mesh.n_vertices)
    np.add.at(mass, mesh.triangles.ravel(), np.repeat(mesh.tri_area / 3.0, 3))
    return mass


def boundary_lumped_length(mesh):
    """Half the length of both boundary edges meeting at each loop vertex."""
    return 0.5 * (mesh.edge_len + np.roll(mesh.edge_len, 1))


def export_obj(mesh, stream, positions=None):
    """OBJ text: ``v x y z`` lines then 1-based ``f i j k`` lines."""
    if positions is None:
        positions = np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    for x, y, z in positions:
        stream.write('v {!r} {!r} {!r}\n'.format(float(x), float(y), float(z)))
    for i, j, k in mesh.triangles + 1:
        stream.write(f'f {i} {j} {k}\n')


def export_vtk(mesh, stream, positions=None, title='cmcdisk mesh'):
    """Legacy ASCII VTK unstructured grid with VTK_TRIANGLE (5) cells."""
    if positions is None:
        positions = np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    stream.write('# vtk DataFile Version 3.0\n')
    stream.write(title + '\n')
    stream.write('ASCII\n')
    stream.write('DATASET UNSTRUCTURED_GRID\n')
    stream.write(f'POINTS {mesh.n_vertices} double\n')
    for x, y, z in positions:
        stream.write('{!r} {!r} {!r}\n'.format(float(x), float(y), float(z)))
    stream.write(f'CELLS {mesh.n_triangles} {4 * mesh.n_triangles}\n')
    for i, j, k in mesh.triangles:
        stream.write(f'3 {i} {j} {k}\n')
    stream.write(f'CELL_TYPES {mesh.n_triangles}\n')
    for _ in range(mesh.n_triangles):
        stream.write('5\n')
