"""Critical points, continuation, mountain pass and the confinement and concentration diagnostics."""
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from cmcdisk.energy import (HomotopyPath, SurfaceMap, bead_volume, dirichlet, energy_summary,
                            hopf_defect, offset_of_map, perturbed_dirichlet, residual, retract,
                            energy_gradient, swept_volume)
from cmcdisk.errors import (ConfigError, ContinuationError, ConvergenceError, DegreeError,
                            DivergenceError, PathError, ProjectionError, SolverError,
                            TrivialPathError)
from cmcdisk.mesh import lumped_mass, stiffness_matrix
from cmcdisk.spectrum import assemble_second_variation, reduction_matrix
from cmcdisk.surface import Sphere

logger = logging.getLogger(__name__)

NONCONSTANT = 'nonconstant critical point'
COLLAPSE = 'constant-map collapse'
PAIR_BUDGET = 2_000_000


@dataclass(frozen=True)
class SolveConfig:
    grad_tol: float = 1e-8
    max_iters: int = 200
    initial_step: float = 1.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    newton_switch_tol: float = 1e-2
    strategy: str = 'auto'
    eps_start: float = 0.5
    eps_ratio: float = 0.5
    eps_floor: float = 1e-3
    final_zero_stage: bool = True
    r_grid: tuple = (1.0,)
    slope_bound: float = 10.0
    eta_num: float = 0.05
    beta_num: float = 1e-4
    shrink_factor: float = 2.0
    mesh_tol_constant: float = 10.0
    bead_spacing_cap: float = None
    checkpoint_every: int = 0
    sweeps: int = 50
    sweep_step: float = 1.0
    polish: bool = True
    degree_tol: float = 0.05

    def __post_init__(self):
        for name in ('grad_tol', 'initial_step', 'armijo', 'newton_switch_tol', 'eta_num',
                     'beta_num', 'mesh_tol_constant', 'sweep_step', 'degree_tol'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if not 0.0 < self.backtrack < 1.0:
            raise ConfigError(f'backtrack factor must lie in (0, 1), got {self.backtrack}')
        if not 0.0 < self.eps_ratio < 1.0:
            raise ConfigError(f'eps_ratio must lie in (0, 1) for a decreasing schedule, '
                              f'got {self.eps_ratio}')
        if self.strategy not in ('auto', 'descent', 'newton'):
            raise ConfigError(f'unknown solver strategy {self.strategy!r}')
        if any(not 0.0 < r <= 1.0 for r in self.r_grid):
            raise ConfigError(f'r grid must lie in (0, 1], got {self.r_grid}')

    def epsilon_schedule(self, start=None):
        eps = self.eps_start if start is None else start
        schedule = []
        while eps > self.eps_floor * (1.0 + 1e-12):
            schedule.append(eps)
            eps *= self.eps_ratio
        schedule.append(self.eps_floor)
        if self.final_zero_stage:
            schedule.append(0.0)
        return schedule

    def spacing_cap(self, surface):
        return 0.05 * surface.diameter if self.bead_spacing_cap is None else self.bead_spacing_cap


@dataclass
class MaxPrincipleResult:
    status: str
    violation: float
    mesh_tol: float

    @property
    def passed(self):
        return self.status != 'fail'


@dataclass
class ConcentrationReport:
    detected: bool
    centers: list = field(default_factory=list)
    scales: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    boundary_distances: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    orth_defect: float
    energies: dict
    hopf_defect: float
    label: str
    max_principle: str = None
    morse_index: int = None
    concentration: ConcentrationReport = None
    history: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            'converged': self.converged,
            'iterations': self.iterations,
            'residual': self.residual,
            'orth_defect': self.orth_defect,
            'energies': self.energies,
            'hopf_defect': self.hopf_defect,
            'label': self.label,
            'max_principle': self.max_principle,
            'morse_index': self.morse_index,
            'concentration': None if self.concentration is None else self.concentration.to_dict(),
        }


def classify(u, config):
    return COLLAPSE if dirichlet(u) < config.beta_num else NONCONSTANT


def _capped(displacement, cap):
    largest = float(np.linalg.norm(displacement, axis=1).max())
    if largest > cap:
        displacement = displacement * (cap / largest)
    return displacement


def _local_reduction(u, v, params):
    """Energy change of the local reduction: D(v) + V(segment u to v) - D(u)."""
    return (perturbed_dirichlet(v, params.epsilon, params.p) + bead_volume(u, v, params.f)
            - perturbed_dirichlet(u, params.epsilon, params.p))


def descent_step(u, params, config, g=None):
    """Preconditioned projected-gradient step with Armijo backtracking, or None."""
    mesh = u.mesh
    g = energy_gradient(u, params) if g is None else g
    P = reduction_matrix(u)
    K = sp.kron(stiffness_matrix(mesh), sp.identity(3))
    M = sp.diags(np.repeat(lumped_mass(mesh), 3))
    B = (P.T @ (K + M) @ P).tocsc()
    direction = (P @ spla.spsolve(B, -(P.T @ g.ravel()))).reshape(-1, 3)
    direction = _capped(direction, config.spacing_cap(u.surface))
    slope = float(np.sum(g * direction))
    if slope >= 0.0:
        return None
    alpha = config.initial_step
    for _ in range(config.max_backtracks):
        try:
            v = retract(u, direction, alpha)
        except ProjectionError:
            alpha *= config.backtrack
            continue
        reduction = _local_reduction(u, v, params)
        if reduction <= config.armijo * alpha * slope:
            return v, alpha, reduction
        alpha *= config.backtrack
    return None


def newton_step(u, params, config, current=None):
    """Levenberg-Marquardt step on the reduced Euler-Lagrange system, or None.

    Steps are accepted on residual decrease alone; near a saddle the energy may rise.
    """
    current = residual(u, params) if current is None else current
    system = assemble_second_variation(u, params, symmetric=False)
    g = energy_gradient(u, params)
    mu = max(1e-8, current.norm)
    try:
        d = spla.spsolve((system.A + mu * system.M).tocsc(), -system.restrict(g))
    except RuntimeError:
        return None
    if not np.all(np.isfinite(d)):
        return None
    direction = _capped(system.embed(d), config.spacing_cap(u.surface))
    alpha = 1.0
    for _ in range(config.max_backtracks):
        try:
            v = retract(u, direction, alpha)
            trial = residual(v, params)
        except ProjectionError:
            alpha *= config.backtrack
            continue
        if trial.norm < (1.0 - config.armijo * alpha) * current.norm:
            return v, alpha, _local_reduction(u, v, params)
        alpha *= config.backtrack
    return None


def _report(u, params, config, converged, iterations, res, history):
    summary = energy_summary(u, params)
    energies = {key: summary[key] for key in ('D', 'D_eps', 'V', 'E')}
    status = None
    if params.barrier is not None:
        status = check_max_principle(u, params, config).status
    label = classify(u, config)
    if label == COLLAPSE:
        logger.warning('solution collapsed to a constant map (D=%.3e)', energies['D'])
    return SolveReport(converged, iterations, res.norm, res.orthogonality_defect, energies,
                       hopf_defect(u), label, status, history=history)


def solve_critical_point(u0, params, config=None, callback=None):
    """Drive ``u0`` to a critical point of the perturbed energy.

    ``callback(iteration, u)`` is called every ``config.checkpoint_every`` iterations.
    """
    config = config or SolveConfig()
    u = u0
    res = residual(u, params)
    tracked = perturbed_dirichlet(u, params.epsilon, params.p)
    history = [{'iter': 0, 'E': tracked, 'D': dirichlet(u), 'residual': res.norm,
                'step': 0.0, 'orth_defect': res.orthogonality_defect, 'phase': 'start'}]
    iteration = 0
    while res.norm > config.grad_tol:
        if iteration >= config.max_iters:
            error = ConvergenceError(f'no convergence in {config.max_iters} iterations '
                                     f'(residual {res.norm:.3e})')
            error.report = _report(u, params, config, False, iteration, res, history)
            raise error
        iteration += 1
        use_newton = (config.strategy == 'newton'
                      or (config.strategy == 'auto' and res.norm < config.newton_switch_tol))
        step, phase = None, 'descent'
        if use_newton:
            step, phase = newton_step(u, params, config, res), 'newton'
        if step is None:
            step, phase = descent_step(u, params, config), 'descent'
        if step is None:
            error = DivergenceError(f'line search failed at iteration {iteration} '
                                    f'(residual {res.norm:.3e})')
            error.report = _report(u, params, config, False, iteration, res, history)
            raise error
        u, alpha, reduction = step
        tracked += reduction
        res = residual(u, params)
        history.append({'iter': iteration, 'E': tracked, 'D': dirichlet(u), 'residual': res.norm,
                        'step': alpha, 'orth_defect': res.orthogonality_defect, 'phase': phase})
        logger.debug('iteration %d (%s): E=%.12g residual=%.3e step=%.3g',
                     iteration, phase, tracked, res.norm, alpha)
        if callback is not None and config.checkpoint_every and iteration % config.checkpoint_every == 0:
            callback(iteration, u)
    report = _report(u, params, config, True, iteration, res, history)
    logger.info('converged in %d iterations: D=%.8g residual=%.3e (%s)',
                iteration, report.energies['D'], res.norm, report.label)
    return u, report


def warm_start(config):
    """Newton from the first iteration when ``u0`` already sits near a critical point.

    Critical points here are saddles; descent from one slides off towards the
    constant maps.
    """
    return replace(config, strategy='newton') if config.strategy == 'auto' else config


def continue_epsilon(u, params, config=None, schedule=None, callback=None, warm=False):
    """Warm-started solves along a decreasing epsilon schedule.

    Every stage after the first starts from a converged critical point and so
    runs Newton; ``warm`` does the same for the first stage.
    Returns a list of ``(epsilon, map, report)``; the last report carries the
    concentration diagnostic of the whole sequence.
    """
    config = config or SolveConfig()
    schedule = config.epsilon_schedule(params.epsilon or None) if schedule is None else list(schedule)
    if any(a <= b for a, b in zip(schedule, schedule[1:])):
        raise ConfigError(f'epsilon schedule must be decreasing, got {schedule}')
    stages = []
    for eps in schedule:
        stage_config = warm_start(config) if warm or stages else config
        try:
            u, report = solve_critical_point(u, params.with_epsilon(eps), stage_config, callback)
        except SolverError as e:
            raise ContinuationError(f'stage epsilon={eps:g} failed: {e.message}',
                                    stages=stages) from e
        logger.info('epsilon stage %g: D=%.8g', eps, report.energies['D'])
        stages.append((eps, u, report))
    if len(stages) > 1:
        stages[-1][2].concentration = detect_concentration([(e, m) for e, m, _ in stages], config)
    return stages


def continue_curvature(u, params, values, config=None, callback=None, warm=False):
    """Warm-started solves for each target curvature in ``values`` (scaling f by H/H_ref)."""
    config = config or SolveConfig()
    stages = []
    for H in values:
        stage_config = warm_start(config) if warm or stages else config
        if params.H > 0:
            stage_params = params.scaled(H / params.H)
        else:
            stage_params = type(params)(params.epsilon, params.p, H, None, params.barrier)
        try:
            u, report = solve_critical_point(u, stage_params, stage_config, callback)
        except SolverError as e:
            raise ContinuationError(f'stage H={H:g} failed: {e.message}', stages=stages) from e
        stages.append((H, u, report))
    return stages


@dataclass(frozen=True)
class CapGeometry:
    """Sphere of radius ``rho`` centered at height ``d`` meeting the unit-scaled constraint orthogonally."""
    H: float
    R: float
    rho: float
    d: float
    height: float
    area: float
    opening: float


def cap_geometry(H, R=1.0):
    if H <= 0:
        raise SolverError(f'cap needs positive curvature, got H={H}')
    rho = 2.0 / H
    d = math.sqrt(R ** 2 + rho ** 2)
    height = rho - (d ** 2 + rho ** 2 - R ** 2) / (2.0 * d)
    opening = math.acos((rho - height) / rho)
    return CapGeometry(H, R, rho, d, height, 2.0 * math.pi * rho * height, opening)


def flat_disk(mesh, surface, noise=0.0, seed=0):
    """Equatorial disk, optionally with in-plane noise (the z = 0 symmetry keeps it planar)."""
    x = np.column_stack([mesh.vertices, np.zeros(mesh.n_vertices)])
    radius = np.linalg.norm(mesh.vertices, axis=1)
    positions = np.zeros_like(x)
    inside = radius > 0.0
    positions[inside] = radius[inside, None] * surface.radial_point(x[inside])
    u = SurfaceMap(mesh, _on_boundary(surface, mesh, positions), surface)
    if noise > 0.0:
        rng = np.random.default_rng(seed)
        shake = np.zeros_like(positions)
        shake[:, :2] = noise * rng.standard_normal((mesh.n_vertices, 2))
        u = retract(u, shake)
    return u


def _on_boundary(surface, mesh, positions):
    positions = np.array(positions)
    b = mesh.boundary_loop
    positions[b] = surface.closest_point(positions[b])
    return positions


def orthogonal_cap(mesh, surface, H):
    """Conformal parametrization of the cap meeting a centered sphere orthogonally."""
    if not isinstance(surface, Sphere):
        raise ConfigError('the cap initializer needs a sphere constraint')
    cap = cap_geometry(H, surface.radius)
    r = np.linalg.norm(mesh.vertices, axis=1)
    phi = np.arctan2(mesh.vertices[:, 1], mesh.vertices[:, 0])
    theta = 2.0 * np.arctan(r * math.tan(0.5 * cap.opening))
    center = np.array([0.0, 0.0, cap.d])
    positions = center + cap.rho * np.column_stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)])
    return SurfaceMap(mesh, _on_boundary(surface, mesh, positions), surface)


def constant_map(mesh, surface, point=None):
    point = surface.radial_point(np.array([0.0, 0.0, 1.0])) if point is None else np.asarray(point)
    return SurfaceMap(mesh, np.tile(point, (mesh.n_vertices, 1)), surface)


def _extents(surface):
    return np.array([np.linalg.norm(surface.radial_point(e)) for e in np.eye(3)])


def seed_sweepout(mesh, surface, beads=40, bulge=0.0, bead_spacing_cap=None):
    """Slices of the enclosed region from the south to the north pole, degree one."""
    a, b, c = _extents(surface)
    x1, x2 = mesh.vertices[:, 0], mesh.vertices[:, 1]
    lift = 1.0 - np.sum(mesh.vertices ** 2, axis=1)
    maps = []
    for t in np.linspace(0.0, 1.0, beads):
        s = math.sin(math.pi * t)
        z = -c * math.cos(math.pi * t) + bulge * s * lift
        positions = np.column_stack([a * s * x1, b * s * x2, z * np.ones(mesh.n_vertices)])
        maps.append(SurfaceMap(mesh, _on_boundary(surface, mesh, positions), surface))
    maps[0] = constant_map(mesh, surface, maps[0].positions[0])
    maps[-1] = constant_map(mesh, surface, maps[-1].positions[0])
    path = HomotopyPath(maps, bead_spacing_cap)
    path.check_spacing()
    return path


def path_degree(path, params, config):
    """Degree of a closed sweepout inferred from its swept volume."""
    total = params.f.integral_over(path.surface)
    ratio = swept_volume(path, params.f) / total
    degree = int(round(ratio))
    if abs(ratio - degree) > config.degree_tol:
        logger.warning('swept volume ratio %.4f is not close to an integer', ratio)
    return degree, ratio


def _slice_energies(path, params):
    energies = [perturbed_dirichlet(path.beads[0], params.epsilon, params.p)]
    volume = 0.0
    for u, v in zip(path.beads, path.beads[1:]):
        volume += bead_volume(u, v, params.f)
        energies.append(perturbed_dirichlet(v, params.epsilon, params.p) + volume)
    return np.array(energies)


def _arc_length_reparametrize(path):
    mass = lumped_mass(path.mesh)
    beads = path.beads
    gaps = [math.sqrt(float(np.sum(mass[:, None] * (v.positions - u.positions) ** 2)))
            for u, v in zip(beads, beads[1:])]
    arc = np.concatenate([[0.0], np.cumsum(gaps)])
    if arc[-1] <= 0.0:
        return path
    targets = np.linspace(0.0, arc[-1], len(beads))
    new = [beads[0]]
    for s in targets[1:-1]:
        k = min(int(np.searchsorted(arc, s, side='right')) - 1, len(beads) - 2)
        w = (s - arc[k]) / (arc[k + 1] - arc[k]) if arc[k + 1] > arc[k] else 0.0
        new.append(retract(beads[k], w * (beads[k + 1].positions - beads[k].positions)))
    new.append(beads[-1])
    return HomotopyPath(new, path.bead_spacing_cap)


def mountain_pass(path0, params, config=None):
    """String-method relaxation of a sweepout; returns ``(path, max_slice, level)``.

    The level is the largest slice energy of the relaxed path, an upper bound
    for the min-max value.
    """
    config = config or SolveConfig()
    degree, ratio = path_degree(path0, params, config)
    if degree == -1:
        raise DegreeError(f'sweepout has degree -1 (volume ratio {ratio:.4f}); the path is reversed')
    if degree != 1:
        raise DegreeError(f'sweepout degree is {degree} (volume ratio {ratio:.4f}), expected 1')
    path = path0
    energies = _slice_energies(path, params)
    levels = [float(energies.max())]
    step = config.sweep_step
    bead_config = replace(config, initial_step=step, max_backtracks=4)
    for sweep in range(config.sweeps):
        top = int(np.argmax(energies))
        if residual(path.beads[top], params).norm <= config.grad_tol:
            break
        moved = [path.beads[0]]
        for u in path.beads[1:-1]:
            result = descent_step(u, params, bead_config)
            moved.append(u if result is None else result[0])
        moved.append(path.beads[-1])
        try:
            trial = _arc_length_reparametrize(HomotopyPath(moved, path.bead_spacing_cap))
            trial.check_spacing()
        except (PathError, ProjectionError):
            trial = None
        trial_energies = None if trial is None else _slice_energies(trial, params)
        if trial_energies is None or trial_energies.max() > levels[-1] * (1.0 + 1e-12):
            step *= 0.5
            bead_config = replace(bead_config, initial_step=step)
            logger.debug('sweep %d rejected, step now %.3g', sweep, step)
            if step < 1e-6:
                break
            continue
        path, energies = trial, trial_energies
        levels.append(float(energies.max()))
        logger.debug('sweep %d: max slice energy %.10g', sweep, levels[-1])
    top = int(np.argmax(energies))
    max_slice = path.beads[top]
    if config.polish:
        max_slice, _ = solve_critical_point(max_slice, params, replace(config, strategy='newton'))
    if dirichlet(max_slice) < config.beta_num:
        raise TrivialPathError(f'max slice collapsed to a constant map (D={dirichlet(max_slice):.3e})')
    logger.info('mountain pass level %.8g after %d accepted sweeps', levels[-1], len(levels) - 1)
    path.levels = levels
    return path, max_slice, levels[-1]


@dataclass
class MonotonicityTable:
    rows: list
    slopes: list
    flagged: list
    non_increasing: bool
    errors: dict


def monotonicity_sweep(path0, params, config=None):
    """Min-max levels of the ``r f`` family over the configured r grid."""
    config = config or SolveConfig()
    rows, errors = [], {}
    for r in sorted(config.r_grid):
        try:
            _, _, level = mountain_pass(path0, params.scaled(r), config)
        except SolverError as e:
            logger.warning('r=%g failed: %s', r, e)
            errors[r] = str(e)
            continue
        rows.append({'r': r, 'omega': level, 'omega_over_r': level / r})
    slopes, flagged = [], []
    for a, b in zip(rows, rows[1:]):
        slope = (b['omega_over_r'] - a['omega_over_r']) / (b['r'] - a['r'])
        slopes.append(slope)
        if -slope > config.slope_bound:
            flagged.append(a['r'])
    tol = 1e-3 * max([abs(row['omega_over_r']) for row in rows] + [1.0])
    non_increasing = all(s * (b['r'] - a['r']) <= tol
                         for s, a, b in zip(slopes, rows, rows[1:]))
    return MonotonicityTable(rows, slopes, flagged, non_increasing, errors)


def vertex_energies(u):
    """Lumped share of ``|grad u|^2`` at each vertex."""
    G = u.gradient()
    density = u.mesh.tri_area * np.sum(G * G, axis=(1, 2)) / 3.0
    out = np.zeros(u.mesh.n_vertices)
    np.add.at(out, u.mesh.triangles.ravel(), np.repeat(density, 3))
    return out


def _ball_energies(tree, energy, radius, budget=PAIR_BUDGET):
    """Energy inside the closed ball of ``radius`` around every vertex.

    Centers are processed in blocks so at most about ``budget`` neighbour
    pairs are held at once.
    """
    n = tree.n
    out = energy.copy()
    step = max(1, budget // n)
    for start in range(0, n, step):
        block = cKDTree(tree.data[start:start + step])
        near = block.sparse_distance_matrix(tree, radius, output_type='ndarray')
        # each center counts itself once, through ``out = energy.copy()``
        near = near[near['i'] + start != near['j']]
        out[start:start + step] += np.bincount(near['i'], weights=energy[near['j']],
                                               minlength=block.n)
    return out


def _ball_energy_at(tree, energy, point, radius):
    return float(energy[tree.query_ball_point(point, radius)].sum())


def concentration_scale(u, eta, tree=None):
    """Smallest radius whose best ball carries ``eta / 3``; None when no ball up to 1/2 does."""
    mesh = u.mesh
    if tree is None:
        tree = cKDTree(mesh.vertices)
    energy = vertex_energies(u)
    target = eta / 3.0
    radii = [mesh.mesh_size_h]
    while radii[-1] * 2.0 <= 0.5:
        radii.append(radii[-1] * 2.0)
    if radii[-1] < 0.5:
        radii.append(0.5)
    best = [float(_ball_energies(tree, energy, t).max()) for t in radii]
    hit = next((k for k, q in enumerate(best) if q >= target), None)
    if hit is None:
        return None
    if hit == 0:
        t = radii[0]
    else:
        lo, hi = radii[hit - 1], radii[hit]
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if _ball_energies(tree, energy, mid).max() >= target:
                hi = mid
            else:
                lo = mid
            if hi - lo < 1e-3 * mesh.mesh_size_h:
                break
        t = hi
    center = int(np.argmax(_ball_energies(tree, energy, t)))
    local = _ball_energy_at(tree, energy, mesh.vertices[center], 2.0 * t)
    return t, mesh.vertices[center], local


def detect_concentration(sequence, config=None, eta=None):
    """Scan ``(epsilon, map)`` pairs for shrinking balls of concentrated Dirichlet energy."""
    config = config or SolveConfig()
    eta = config.eta_num if eta is None else eta
    report = ConcentrationReport(False)
    if not sequence:
        return report
    mesh = sequence[0][1].mesh
    if any(u.mesh is not mesh for _, u in sequence):
        raise SolverError('concentration scan needs maps on one mesh')
    tree = cKDTree(mesh.vertices)
    for eps, u in sequence:
        found = concentration_scale(u, eta, tree)
        if found is None:
            continue
        t, center, local = found
        report.centers.append([float(c) for c in center])
        report.scales.append(float(t))
        report.energies.append(local)
        report.ratios.append(float(eps / t))
        report.boundary_distances.append(float(1.0 - np.linalg.norm(center)))
    if len(report.scales) >= 2:
        shrinking = report.scales[0] >= config.shrink_factor * report.scales[-1]
        report.detected = bool(shrinking and report.energies[-1] >= eta / 2.0)
    if report.detected:
        logger.info('energy concentration at %s, scale %.3g', report.centers[-1], report.scales[-1])
    return report


def check_max_principle(u, params, config=None):
    """Confinement to the barrier region (pass_b) or its t0 offset (pass_a)."""
    config = config or SolveConfig()
    mesh_tol = config.mesh_tol_constant * u.mesh.mesh_size_h ** 2
    barrier = params.barrier
    surface = u.surface if barrier is None else barrier.surface
    t0 = 0.0 if barrier is None else barrier.t0
    violation = float(offset_of_map(u, surface).max())
    if violation <= mesh_tol:
        status = 'pass_b'
    elif violation <= t0 + mesh_tol:
        status = 'pass_a'
    else:
        status = 'fail'
    logger.info('max principle: %s (max offset %.3e, tol %.3e)', status, violation, mesh_tol)
    return MaxPrincipleResult(status, violation, mesh_tol)
