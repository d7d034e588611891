"""Convex implicit surfaces: the constraint, the barrier and the cutoff ``f``.

A surface is the zero set of a level function ``phi`` which is negative inside
the enclosed region. All oracles accept points of shape ``(3,)`` or ``(n, 3)``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from cmcdisk.errors import ConfigError, ProjectionError, SurfaceError, TangencyError

logger = logging.getLogger(__name__)

PROJECTION_TOL = 1e-12
TANGENCY_TOL = 1e-8
T0_GRID_SIZE = 64
CURVATURE_SAMPLES = 500


def tangent_basis(normals):
    """Orthonormal pairs ``(t1, t2)`` with ``t1 x t2 = n`` for unit normals ``n``."""
    n = np.atleast_2d(normals)
    helper = np.zeros_like(n)
    helper[np.arange(len(n)), np.argmin(np.abs(n), axis=1)] = 1.0
    t1 = helper - np.sum(helper * n, axis=1)[:, None] * n
    t1 /= np.linalg.norm(t1, axis=1)[:, None]
    t2 = np.cross(n, t1)
    return t1, t2


def fibonacci_directions(count):
    k = np.arange(count) + 0.5
    z = 1.0 - 2.0 * k / count
    r = np.sqrt(1.0 - z ** 2)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * k
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


class ImplicitSurface:
    kind = None
    band_width = 0.1
    max_iter = 50

    def phi(self, y):
        raise NotImplementedError

    def grad(self, y):
        raise NotImplementedError

    def hessian(self, y):
        raise NotImplementedError

    def radial_point(self, directions):
        """Point of the surface on the ray from the origin through ``directions``."""
        raise NotImplementedError

    @property
    def bounding_radius(self):
        raise NotImplementedError

    @property
    def volume(self):
        raise NotImplementedError

    @property
    def diameter(self):
        return 2.0 * self.bounding_radius

    def contains(self, y, tol=0.0):
        return self.phi(y) <= tol

    def normal(self, q):
        """Unit normal pointing into the enclosed region."""
        g = self.grad(q)
        return -g / np.linalg.norm(g, axis=-1, keepdims=True)

    def closest_point(self, y):
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        pts = np.atleast_2d(y)
        if np.any(np.linalg.norm(pts, axis=1) > 2.0 * self.bounding_radius + 1e-12):
            bad = pts[np.argmax(np.linalg.norm(pts, axis=1))]
            raise ProjectionError('point outside the projection range', point=bad)
        q = self._project(pts)
        return q[0] if single else q

    def _project(self, y):
        # seed by a few gradient-projection steps onto the level set
        q = y.copy()
        for _ in range(5):
            g = self.grad(q)
            gg = np.sum(g * g, axis=1)
            if np.any(gg < 1e-24):
                raise ProjectionError('vanishing gradient during projection',
                                      point=y[np.argmin(gg)])
            q = q - (self.phi(q) / gg)[:, None] * g
        g = self.grad(q)
        lam = np.sum((y - q) * g, axis=1) / np.sum(g * g, axis=1)
        for it in range(self.max_iter):
            g = self.grad(q)
            res_q = q - y + lam[:, None] * g
            res_phi = self.phi(q)
            if max(np.abs(res_phi).max(), np.abs(res_q).max()) <= PROJECTION_TOL:
                break
            jac = np.zeros((len(q), 4, 4))
            jac[:, :3, :3] = np.eye(3) + lam[:, None, None] * self.hessian(q)
            jac[:, :3, 3] = g
            jac[:, 3, :3] = g
            rhs = -np.concatenate([res_q, res_phi[:, None]], axis=1)
            try:
                step = np.linalg.solve(jac, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                raise ProjectionError('singular projection system', point=y[0]) from None
            q = q + step[:, :3]
            lam = lam + step[:, 3]
        else:
            worst = np.argmax(np.abs(self.phi(q)))
            raise ProjectionError(f'projection did not converge in {self.max_iter} iterations',
                                  point=y[worst])
        logger.debug('projected %d points in %d iterations', len(y), it)
        return q

    def _check_tangent(self, q, v):
        eta = self.normal(q)
        off = np.abs(np.sum(v * eta, axis=-1))
        if np.any(off > TANGENCY_TOL * np.maximum(1.0, np.linalg.norm(v, axis=-1))):
            raise TangencyError(f'vector is not tangent to the surface (normal part {off.max():.3e})')
        return eta

    def second_fundamental_form(self, q, w, v):
        """``A^w(v, v)``, positive for ``w`` the inward normal on a convex surface."""
        q, w, v = (np.asarray(a, dtype=float) for a in (q, w, v))
        eta = self._check_tangent(q, v)
        g = self.grad(q)
        hvv = np.einsum('...i,...ij,...j->...', v, self.hessian(q), v)
        return np.sum(w * eta, axis=-1) * hvv / np.linalg.norm(g, axis=-1)

    def shape_operator(self, q):
        """Second fundamental form with respect to ``eta`` in a tangent basis."""
        q = np.atleast_2d(q)
        eta = self.normal(q)
        t1, t2 = tangent_basis(eta)
        frame = np.stack([t1, t2], axis=2)
        scale = np.linalg.norm(self.grad(q), axis=1)
        return np.einsum('nia,nij,njb->nab', frame, self.hessian(q), frame) / scale[:, None, None]

    def principal_curvatures(self, q, offset=0.0):
        """Principal curvatures at ``q`` of the surface or of its outward offset at distance ``offset``."""
        kappa = np.linalg.eigvalsh(self.shape_operator(q))
        return kappa / (1.0 + offset * kappa)

    def mean_curvature(self, q, offset=0.0):
        return self.principal_curvatures(q, offset).sum(axis=1)

    def sample_points(self, count=CURVATURE_SAMPLES):
        return self.radial_point(fibonacci_directions(count))

    def check_band(self, count=200):
        q = self.sample_points(count)
        eta = self.normal(q)
        for s in (-self.band_width, self.band_width):
            if np.min(np.linalg.norm(self.grad(q + s * eta), axis=1)) < 1e-12:
                raise SurfaceError('level function gradient vanishes near the surface')
        if np.any(self.phi(q + 1e-6 * eta) >= 0.0):
            raise SurfaceError('normal does not point into the enclosed region')


class Sphere(ImplicitSurface):
    kind = 'sphere'

    def __init__(self, radius=1.0):
        if radius <= 0:
            raise SurfaceError(f'sphere radius must be positive, got {radius}')
        self.radius = float(radius)

    def phi(self, y):
        y = np.asarray(y, dtype=float)
        return (np.sum(y * y, axis=-1) - self.radius ** 2) / (2.0 * self.radius)

    def grad(self, y):
        return np.asarray(y, dtype=float) / self.radius

    def hessian(self, y):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.eye(3) / self.radius, y.shape[:-1] + (3, 3)).copy()

    def radial_point(self, directions):
        d = np.asarray(directions, dtype=float)
        return self.radius * d / np.linalg.norm(d, axis=-1, keepdims=True)

    @property
    def bounding_radius(self):
        return self.radius

    @property
    def volume(self):
        return 4.0 * np.pi * self.radius ** 3 / 3.0

    def __repr__(self):
        return f'sphere {self.radius!r}'


class Ellipsoid(ImplicitSurface):
    kind = 'ellipsoid'

    def __init__(self, a, b, c):
        self.axes = np.array([a, b, c], dtype=float)
        if np.any(self.axes <= 0):
            raise SurfaceError(f'ellipsoid semi-axes must be positive, got {tuple(self.axes)}')

    def phi(self, y):
        return np.sum((np.asarray(y, dtype=float) / self.axes) ** 2, axis=-1) - 1.0

    def grad(self, y):
        return 2.0 * np.asarray(y, dtype=float) / self.axes ** 2

    def hessian(self, y):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.diag(2.0 / self.axes ** 2), y.shape[:-1] + (3, 3)).copy()

    def radial_point(self, directions):
        d = np.asarray(directions, dtype=float)
        return d / np.sqrt(np.sum((d / self.axes) ** 2, axis=-1, keepdims=True))

    @property
    def bounding_radius(self):
        return float(self.axes.max())

    @property
    def volume(self):
        return 4.0 * np.pi * float(np.prod(self.axes)) / 3.0

    def __repr__(self):
        return 'ellipsoid {!r} {!r} {!r}'.format(*map(float, self.axes))


def parse_surface_spec(text):
    """``sphere R`` or ``ellipsoid a b c``."""
    words = str(text).split()
    if not words:
        raise ConfigError('empty surface description')
    kind, args = words[0].lower(), words[1:]
    try:
        values = [float(a) for a in args]
    except ValueError:
        raise ConfigError(f'malformed surface description: {text!r}') from None
    try:
        if kind == 'sphere' and len(values) == 1:
            surface = Sphere(values[0])
        elif kind == 'ellipsoid' and len(values) == 3:
            surface = Ellipsoid(*values)
        else:
            raise ConfigError(f'unknown surface description: {text!r}')
        surface.check_band()
    except SurfaceError as e:
        raise ConfigError(str(e)) from e
    return surface


@dataclass(frozen=True)
class BarrierSpec:
    surface: ImplicitSurface
    H0: float
    H: float
    t0: float

    def __post_init__(self):
        if not 0.0 < self.H < self.H0:
            raise SurfaceError(f'target curvature H={self.H} must lie in (0, H0={self.H0})')
        if not 0.0 < self.t0 <= 0.25:
            raise SurfaceError(f'offset depth t0={self.t0} must lie in (0, 1/4]')


def make_barrier(surface, H, H0=None, t0=None):
    """Barrier with ``H0`` defaulting to the sampled minimum mean curvature."""
    if H0 is None:
        H0 = float(surface.mean_curvature(surface.sample_points()).min())
    if t0 is None:
        t0 = choose_t0(surface, H0, H)
    return BarrierSpec(surface, H0, H, t0)


def offset_distance(barrier, y):
    surface = barrier.surface if isinstance(barrier, BarrierSpec) else barrier
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    pts = np.atleast_2d(y)
    d = np.zeros(len(pts))
    outside = surface.phi(pts) > 0.0
    if np.any(outside):
        q = surface.closest_point(pts[outside])
        d[outside] = np.linalg.norm(pts[outside] - q, axis=1)
    return float(d[0]) if single else d


def choose_t0(surface, H0, H, samples=CURVATURE_SAMPLES):
    if H >= H0:
        raise SurfaceError(f'target curvature H={H} must be below H0={H0}')
    q = surface.sample_points(samples)
    kappa = np.linalg.eigvalsh(surface.shape_operator(q))
    if kappa.min() <= 0.0:
        raise SurfaceError('barrier is not strictly convex at a sampled point')
    threshold = 0.5 * (H0 + H)
    t0 = None
    for t in 0.25 * np.arange(1, T0_GRID_SIZE + 1) / T0_GRID_SIZE:
        if (kappa / (1.0 + t * kappa)).sum(axis=1).min() < threshold:
            break
        t0 = float(t)
    if t0 is None:
        raise SurfaceError(f'no admissible offset depth: barrier too flat for H0={H0}, H={H}')
    logger.debug('chose t0=%g for H0=%g H=%g', t0, H0, H)
    return t0


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)


def smoothstep_slope(s):
    s = np.clip(s, 0.0, 1.0)
    return 30.0 * s ** 2 * (1.0 - s) ** 2


@dataclass(frozen=True)
class ConstantCurvature:
    """``f`` identically equal to ``H``."""
    H: float

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return np.full(y.shape[:-1], self.H)

    def gradient(self, y):
        return np.zeros_like(np.asarray(y, dtype=float))

    def integral_over(self, surface):
        return self.H * surface.volume

    def scaled(self, r):
        return ConstantCurvature(r * self.H)


@dataclass(frozen=True)
class PrescribedCurvature:
    """``H`` on the barrier region, decaying to zero across the offset band."""
    barrier: BarrierSpec
    scale: float = 1.0
    H: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'H', self.scale * self.barrier.H)

    def profile(self, d):
        t0 = self.barrier.t0
        return self.H * (1.0 - smoothstep((np.asarray(d) - 0.25 * t0) / (0.5 * t0)))

    def profile_slope(self, d):
        t0 = self.barrier.t0
        return -self.H * smoothstep_slope((np.asarray(d) - 0.25 * t0) / (0.5 * t0)) / (0.5 * t0)

    def __call__(self, y):
        return self.profile(offset_distance(self.barrier, y))

    def gradient(self, y):
        y = np.asarray(y, dtype=float)
        pts = np.atleast_2d(y)
        out = np.zeros_like(pts)
        surface = self.barrier.surface
        outside = surface.phi(pts) > 0.0
        if np.any(outside):
            diff = pts[outside] - surface.closest_point(pts[outside])
            d = np.linalg.norm(diff, axis=1)
            out[outside] = (self.profile_slope(d) / np.where(d > 0, d, 1.0))[:, None] * diff
        return out[0] if y.ndim == 1 else out

    def integral_over(self, surface):
        if np.any(offset_distance(self.barrier, surface.sample_points()) > 1e-9):
            raise SurfaceError('constraint region is not enclosed by the barrier')
        return self.H * surface.volume

    def scaled(self, r):
        return PrescribedCurvature(self.barrier, self.scale * r)

    @property
    def lipschitz_bound(self):
        return 15.0 * self.H / (4.0 * self.barrier.t0)


def build_f(barrier):
    if barrier.H >= barrier.H0:
        raise SurfaceError(f'target curvature H={barrier.H} must be below H0={barrier.H0}')
    return PrescribedCurvature(barrier)
