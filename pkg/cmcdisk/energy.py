"""Discrete energies on P1 maps of the disk and the swept volume of a path."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from cmcdisk.errors import ConfigError, PathError, TangencyError
from cmcdisk.mesh import (boundary_lumped_length, centroid_values, gradient, integrate,
                          lumped_mass, stiffness_matrix)
from cmcdisk.surface import ConstantCurvature, fibonacci_directions, offset_distance

logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-9
CONSTANT_TOL = 1e-12
DEFAULT_P = 2.2
VOLUME_SUBSTEPS = 4
MIN_CLEARANCE = 1.0


@dataclass(frozen=True, eq=False)
class SurfaceMap:
    mesh: object
    positions: np.ndarray
    surface: object
    boundary_tol: float = BOUNDARY_TOL

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.shape != (self.mesh.n_vertices, 3):
            raise PathError(f'positions must have shape ({self.mesh.n_vertices}, 3), '
                            f'got {positions.shape}')
        positions.setflags(write=False)
        object.__setattr__(self, 'positions', positions)
        off = np.abs(self.surface.phi(positions[self.mesh.boundary_loop])).max()
        if off > self.boundary_tol:
            raise PathError(f'boundary vertex off the constraint surface by {off:.3e}')

    @property
    def is_boundary(self):
        return self.mesh.is_boundary

    @property
    def boundary_positions(self):
        return self.positions[self.mesh.boundary_loop]

    def gradient(self):
        return gradient(self.mesh, self.positions)

    def is_constant(self, tol=CONSTANT_TOL):
        return bool(np.ptp(self.positions, axis=0).max() <= tol)

    def with_positions(self, positions):
        return SurfaceMap(self.mesh, positions, self.surface, self.boundary_tol)

    def distance(self, other):
        return float(np.linalg.norm(self.positions - other.positions, axis=1).max())

    def __repr__(self):
        return f'<SurfaceMap {self.mesh!r} on {self.surface!r}>'


@dataclass(frozen=True)
class EnergyParams:
    epsilon: float = 0.0
    p: float = DEFAULT_P
    H: float = 0.0
    f: object = None
    barrier: object = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f'epsilon must lie in [0, 1], got {self.epsilon}')
        if self.p <= 2.0:
            raise ConfigError(f'p must exceed 2, got {self.p}')
        if self.p >= 3.0:
            logger.warning('p=%g is outside the range (2, 3) the estimates are made for', self.p)
        if self.H < 0.0:
            raise ConfigError(f'H must be nonnegative, got {self.H}')
        if self.f is None:
            object.__setattr__(self, 'f', ConstantCurvature(self.H))

    @property
    def coupling(self):
        """Coefficient ``epsilon**(p - 2)`` of the p-energy term."""
        return self.epsilon ** (self.p - 2.0)

    def with_epsilon(self, epsilon):
        return EnergyParams(epsilon, self.p, self.H, self.f, self.barrier)

    def scaled(self, r):
        return EnergyParams(self.epsilon, self.p, r * self.H, self.f.scaled(r), self.barrier)


def retract(u, displacement, t=1.0):
    """Move ``u`` by ``t * displacement`` and project the boundary back onto the surface."""
    positions = u.positions + t * np.asarray(displacement, dtype=float)
    b = u.mesh.boundary_loop
    positions[b] = u.surface.closest_point(positions[b])
    return u.with_positions(positions)


def offset_of_map(u, barrier):
    """Offset distance of every vertex image from the region bounded by ``barrier``."""
    return offset_distance(barrier, u.positions)


def dirichlet(u):
    G = u.gradient()
    return 0.5 * float(integrate(u.mesh, np.sum(G * G, axis=(1, 2))))


def perturbed_dirichlet(u, epsilon, p=DEFAULT_P):
    G = u.gradient()
    s = np.sum(G * G, axis=(1, 2))
    density = 0.5 * s + epsilon ** (p - 2.0) * (1.0 + s) ** (0.5 * p) / p
    return float(integrate(u.mesh, density))


def _conformal_factor(G, params):
    s = np.sum(G * G, axis=(1, 2))
    return s, 1.0 + params.coupling * (1.0 + s) ** (0.5 * params.p - 1.0)


def jacobian_normals(G):
    """Per-triangle ``u_x1 x u_x2``."""
    return np.cross(G[..., 0], G[..., 1])


def energy_gradient(u, params):
    """Nodal gradient ``g`` with ``sum_i <g_i, psi_i>`` equal to the first variation."""
    mesh = u.mesh
    G = u.gradient()
    _, weight = _conformal_factor(G, params)
    local = np.einsum('t,tka,tia->tik', mesh.tri_area * weight, G, mesh.grad_basis)
    J = jacobian_normals(G)
    f = params.f(centroid_values(mesh, u.positions))
    local += (mesh.tri_area * f / 3.0)[:, None, None] * J[:, None, :]
    g = np.zeros((mesh.n_vertices, 3))
    np.add.at(g, mesh.triangles, local)
    return g


def tangent_projection(u, vectors):
    """Project boundary rows of nodal ``vectors`` onto the tangent planes of the surface."""
    out = np.array(vectors, dtype=float)
    b = u.mesh.boundary_loop
    eta = u.surface.normal(u.positions[b])
    out[b] -= np.sum(out[b] * eta, axis=1)[:, None] * eta
    return out


def check_admissible(u, psi, tol=1e-8):
    psi = np.asarray(psi, dtype=float)
    b = u.mesh.boundary_loop
    eta = u.surface.normal(u.positions[b])
    normal_part = np.abs(np.sum(psi[b] * eta, axis=1))
    scale = max(1.0, float(np.abs(psi).max()))
    if normal_part.size and normal_part.max() > tol * scale:
        raise TangencyError(f'boundary variation is not tangent (normal part {normal_part.max():.3e})')
    return psi


def first_variation(u, psi, params):
    psi = check_admissible(u, psi)
    return float(np.sum(energy_gradient(u, params) * psi))


@dataclass(frozen=True)
class Residual:
    """Mass-lumped Riesz vector of the first variation plus boundary diagnostics."""
    vector: np.ndarray
    norm: float
    orthogonality_defect: float
    conormal: np.ndarray = field(repr=False)


def residual(u, params):
    mesh = u.mesh
    g = energy_gradient(u, params)
    projected = tangent_projection(u, g)
    mass = lumped_mass(mesh)
    vector = projected / mass[:, None]
    norm = math.sqrt(float(np.sum(projected ** 2 / mass[:, None])))
    b = mesh.boundary_loop
    ell = boundary_lumped_length(mesh)
    # discrete outward conormal derivative u_r at the boundary
    conormal = g[b] / ell[:, None]
    defect = float((np.linalg.norm(projected[b], axis=1) / ell).max()) if len(b) else 0.0
    return Residual(vector, norm, defect, conormal)


def hopf_defect(u):
    G = u.gradient()
    ux, uy = G[..., 0], G[..., 1]
    re = 0.25 * (np.sum(ux * ux, axis=1) - np.sum(uy * uy, axis=1))
    im = -0.5 * np.sum(ux * uy, axis=1)
    return math.sqrt(float(integrate(u.mesh, re ** 2 + im ** 2)))


def mean_curvature(u):
    """Vertex mean curvature read off the Euler-Lagrange system ``Delta u = H u_x1 x u_x2``.

    Vertices whose area normal vanishes get ``nan``.
    """
    mesh = u.mesh
    laplace = stiffness_matrix(mesh) @ u.positions
    J = jacobian_normals(u.gradient())
    normals = np.zeros((mesh.n_vertices, 3))
    np.add.at(normals, mesh.triangles, (mesh.tri_area / 3.0)[:, None, None] * J[:, None, :])
    nn = np.sum(normals * normals, axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(nn > 1e-30, -np.sum(laplace * normals, axis=1) / nn, np.nan)


def segment_volume(mesh, start, stop, f):
    """f-weighted volume swept by the straight segment from ``start`` to ``stop``.

    The time integral is exact for the trilinear integrand, f is taken at the
    centroid of the midpoint map.
    """
    delta = stop - start
    Gs = gradient(mesh, start)
    Gd = gradient(mesh, delta)
    a, c = Gs[..., 0], Gs[..., 1]
    b, d = Gd[..., 0], Gd[..., 1]
    swept = np.cross(a, c) + 0.5 * (np.cross(a, d) + np.cross(b, c)) + np.cross(b, d) / 3.0
    weight = f(centroid_values(mesh, start + 0.5 * delta))
    return float(integrate(mesh, weight * np.sum(centroid_values(mesh, delta) * swept, axis=1)))


def _substeps(u, v, count):
    """Intermediate maps from ``u`` to ``v`` with boundary vertices kept on the surface."""
    steps = [u.positions]
    b = u.mesh.boundary_loop
    for k in range(1, count):
        w = u.positions + (k / count) * (v.positions - u.positions)
        w[b] = u.surface.closest_point(w[b])
        steps.append(w)
    steps.append(v.positions)
    return steps


def bead_volume(u, v, f, substeps=VOLUME_SUBSTEPS):
    steps = _substeps(u, v, substeps)
    return sum(segment_volume(u.mesh, s, t, f) for s, t in zip(steps, steps[1:]))


class HomotopyPath:
    """Beads joined by boundary-retracted straight segments, starting at a constant map."""

    def __init__(self, beads, bead_spacing_cap=None, require_constant_start=True):
        beads = list(beads)
        if len(beads) < 1:
            raise PathError('a path needs at least one bead')
        mesh = beads[0].mesh
        if any(b.mesh is not mesh for b in beads):
            raise PathError('beads do not share a mesh')
        if require_constant_start and not beads[0].is_constant():
            raise PathError('path does not start at a constant map')
        self.beads = beads
        self.surface = beads[0].surface
        self.bead_spacing_cap = (0.05 * self.surface.diameter if bead_spacing_cap is None
                                 else bead_spacing_cap)

    def __len__(self):
        return len(self.beads)

    def __iter__(self):
        return iter(self.beads)

    def __getitem__(self, index):
        return self.beads[index]

    @property
    def mesh(self):
        return self.beads[0].mesh

    @property
    def end(self):
        return self.beads[-1]

    def spacings(self):
        return np.array([u.distance(v) for u, v in zip(self.beads, self.beads[1:])])

    def check_spacing(self):
        spacings = self.spacings()
        if spacings.size and spacings.max() > self.bead_spacing_cap:
            k = int(np.argmax(spacings))
            raise PathError(f'beads {k} and {k + 1} are {spacings[k]:.4g} apart, '
                            f'above the spacing cap {self.bead_spacing_cap:.4g}')
        if spacings.size and spacings.max() > 0.8 * self.bead_spacing_cap:
            logger.warning('bead spacing %.4g is close to the cap %.4g',
                           spacings.max(), self.bead_spacing_cap)
        return spacings

    def ends_constant(self):
        return self.beads[-1].is_constant()

    def reversed(self):
        if not self.ends_constant():
            raise PathError('only a path ending at a constant map can be reversed')
        return HomotopyPath(self.beads[::-1], self.bead_spacing_cap)

    def __add__(self, other):
        if self.end.distance(other.beads[0]) > CONSTANT_TOL:
            raise PathError('paths do not join: end and start differ')
        return HomotopyPath(self.beads + other.beads[1:], self.bead_spacing_cap)

    def extended(self, bead):
        return HomotopyPath(self.beads + [bead], self.bead_spacing_cap,
                            require_constant_start=False)

    @classmethod
    def from_constant(cls, u, base=None, bead_spacing_cap=None):
        """Straight cone from the constant map at ``base`` to ``u``, boundary kept on the surface.

        The default base is the surface point farthest from the antipodes of the
        boundary images, so no boundary chord runs through the center. A base
        too close to those antipodes is first slid there through constant maps,
        which sweep no volume.
        """
        cap = 0.05 * u.surface.diameter if bead_spacing_cap is None else bead_spacing_cap
        if base is None:
            base = u.positions[0] if u.is_constant() else cone_base(u)
        elif not u.is_constant() and _clearance(u, base) < MIN_CLEARANCE:
            safe = cone_base(u)
            return cls(_constant_slide(u, base, safe, cap), cap) + cls._cone(u, safe, cap)
        return cls._cone(u, base, cap)

    @classmethod
    def _cone(cls, u, base, cap):
        mesh = u.mesh
        reach = float(np.linalg.norm(u.positions - base, axis=1).max())
        count = max(2, int(math.ceil(2.0 * reach / cap)) + 1)
        beads = [u.with_positions(np.tile(base, (mesh.n_vertices, 1)))]
        for tau in np.linspace(0.0, 1.0, count)[1:-1]:
            beads.append(retract(beads[0], tau * (u.positions - base)))
        beads.append(u)
        return cls(beads, cap)


def _clearance(u, base):
    """Smallest distance between the direction of ``base`` and the antipodes of the boundary images."""
    b = u.boundary_positions
    directions = b / np.linalg.norm(b, axis=1)[:, None]
    base = np.asarray(base, dtype=float)
    return float(np.linalg.norm(base / np.linalg.norm(base) + directions, axis=1).min())


def _constant_slide(u, start, stop, cap):
    """Constant maps along a great-circle arc of directions from ``start`` to ``stop``."""
    a = np.asarray(start, dtype=float) / np.linalg.norm(start)
    c = np.asarray(stop, dtype=float) / np.linalg.norm(stop)
    if a @ c < -0.5:
        # split near-antipodal arcs at a perpendicular direction
        w = np.cross(a, [1.0, 0.0, 0.0] if abs(a[0]) < 0.9 else [0.0, 1.0, 0.0])
        w /= np.linalg.norm(w)
        return _constant_slide(u, a, w, cap) + _constant_slide(u, w, c, cap)[1:]
    angle = math.acos(float(np.clip(a @ c, -1.0, 1.0)))
    count = max(2, int(math.ceil(angle * u.surface.diameter / cap)) + 1)
    s = np.linspace(0.0, 1.0, count)[:, None]
    if angle < 1e-12:
        directions = np.tile(a, (count, 1))
    else:
        directions = (np.sin((1.0 - s) * angle) * a + np.sin(s * angle) * c) / math.sin(angle)
    points = u.surface.radial_point(directions)
    return [u.with_positions(np.tile(p, (u.mesh.n_vertices, 1))) for p in points]


def cone_base(u, candidates=64):
    b = u.boundary_positions
    directions = b / np.linalg.norm(b, axis=1)[:, None]
    normal = jacobian_normals(u.gradient()).sum(axis=0)
    options = fibonacci_directions(candidates)
    if np.linalg.norm(normal) > 0.0:
        options = np.vstack([normal / np.linalg.norm(normal), options])
    clearance = np.linalg.norm(options[:, None, :] + directions[None, :, :], axis=2).min(axis=1)
    return u.surface.radial_point(options[np.argmax(clearance)])


def swept_volume(path, f, substeps=VOLUME_SUBSTEPS):
    path.check_spacing()
    return sum(bead_volume(u, v, f, substeps) for u, v in zip(path.beads, path.beads[1:]))


def total_energy(u, path, params):
    if path.end.distance(u) > CONSTANT_TOL:
        raise PathError('path does not end at the evaluated map')
    return perturbed_dirichlet(u, params.epsilon, params.p) + swept_volume(path, params.f)


def energy_summary(u, params, path=None):
    """One row of the energy report; the volume is taken along the cone path when none is given."""
    if path is None:
        path = HomotopyPath.from_constant(u)
    D = dirichlet(u)
    D_eps = perturbed_dirichlet(u, params.epsilon, params.p)
    V = swept_volume(path, params.f)
    res = residual(u, params)
    return {
        'epsilon': params.epsilon, 'p': params.p, 'H': params.H,
        'D': D, 'D_eps': D_eps, 'V': V, 'E': D_eps + V,
        'hopf_defect': hopf_defect(u), 'orth_defect': res.orthogonality_defect,
        'residual': res.norm,
    }
