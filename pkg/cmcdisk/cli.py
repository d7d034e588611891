"""Command line front end: one subcommand per pipeline, artifacts under ``--out``."""
import functools
import logging
import os
import time
from datetime import datetime, timezone

import click
import numpy as np

from config import Config
from cmcdisk import Session, configure_logging, engine
from cmcdisk import files
from cmcdisk.energy import HomotopyPath, hopf_defect, swept_volume
from cmcdisk.errors import (BranchingError, CmcDiskError, ConfigError, PathError,
                            ProjectionError, exit_code_for)
from cmcdisk.mesh import export_obj
from cmcdisk.models import Base, Run, RunArtifact
from cmcdisk.runconfig import RunConfig
from cmcdisk.solver import (check_max_principle, constant_map, continue_curvature,
                            continue_epsilon, flat_disk, monotonicity_sweep, mountain_pass,
                            orthogonal_cap, seed_sweepout, solve_critical_point, warm_start)
from cmcdisk.spectrum import (area_index_form, assemble_second_variation, eigenvector_fields,
                              hersch_bound_check, index_comparison_check, morse_index,
                              tangent_frames)

logger = logging.getLogger(__name__)

SCHEMA = 1


class Artifacts:
    """Files written by one run, named relative to the output directory."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.names = []

    def path(self, name):
        full = os.path.join(self.out_dir, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def add(self, path):
        name = os.path.relpath(path, self.out_dir).replace(os.sep, '/')
        if name not in self.names:
            self.names.append(name)
        return path


def run_options(f):
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='Run configuration file.')
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
                  help='Output directory.')
    @click.option('--seed', type=int, default=None)
    @click.option('--H', 'H', type=float, default=None, help='Target mean curvature.')
    @click.option('--eps', type=float, default=None)
    @click.option('--p', type=float, default=None)
    @click.option('--level', type=int, default=None, help='Mesh refinement level.')
    @click.option('--init', type=str, default=None, help='flat, cap, constant or a map.obj path.')
    @functools.wraps(f)
    def wrapper(config_path, out_dir, seed, H, eps, p, level, init, **kwargs):
        overrides = {'seed': seed, 'H': H, 'eps': eps, 'p': p, 'level': level, 'init': init}
        return _run(f, config_path, out_dir, overrides, **kwargs)
    return wrapper


def _run(body, config_path, out_dir, overrides, **kwargs):
    """Shared driver: resolve config, record the run, map errors to exit status."""
    configure_logging()
    Base.metadata.create_all(engine)
    subcommand = body.__name__.replace('_command', '')
    out_dir = out_dir or os.path.join(Config.OUTPUT_DIR, subcommand)
    started = time.time()
    config = None
    with Session() as session:
        run = Run(subcommand=subcommand, config_hash='', out_dir=out_dir,
                  seed=overrides.get('seed') or 0)
        session.add(run)
        session.commit()
        try:
            config = RunConfig.load(config_path, overrides)
            run.config_hash = config.config_hash
            run.seed = config['seed']
            os.makedirs(out_dir, exist_ok=True)
            artifacts = Artifacts(out_dir)
            logger.info('%s run %d, config %s', subcommand, run.id, config.config_hash)
            results = body(config, artifacts, **kwargs)
            timing = artifacts.add(artifacts.path('timing.json'))
            summary = artifacts.path('summary.json')
            files.write_json({
                'schema': SCHEMA,
                'subcommand': subcommand,
                'config': config.resolved(),
                'config_hash': config.config_hash,
                'results': results,
                'artifacts': sorted(artifacts.names),
            }, summary)
            files.write_json({
                'started': datetime.fromtimestamp(started, timezone.utc).isoformat(),
                'elapsed_seconds': time.time() - started,
            }, timing)
            artifacts.add(summary)
            for name in artifacts.names:
                session.add(RunArtifact(run=run, name=name, path=os.path.join(out_dir, name)))
            code = 0
        except CmcDiskError as e:
            e.config_hash = config.config_hash if config is not None else None
            code = exit_code_for(e)
            logger.error('%s failed (exit %d): %s', subcommand, code, e)
            click.echo(f'error: {e}', err=True)
        except Exception:
            # anything outside the hierarchy still closes the ledger row
            session.rollback()
            if config is not None:
                run.config_hash = config.config_hash
            run.finish(1)
            session.commit()
            logger.exception('%s crashed [config %s]', subcommand,
                             config.config_hash if config is not None else '-')
            raise
        run.finish(code)
        session.commit()
    if code:
        raise SystemExit(code)


def load_initial(config, mesh=None):
    mesh = config.mesh() if mesh is None else mesh
    surface = config.surface()
    init = config['init']
    if init == 'flat':
        return flat_disk(mesh, surface, config['noise'], config['seed'])
    if init == 'cap':
        return orthogonal_cap(mesh, surface, config['H'])
    if init == 'constant':
        return constant_map(mesh, surface)
    if os.path.exists(init):
        return files.read_map(init, surface)
    raise ConfigError(f'unknown initializer {init!r}: expected flat, cap, constant or a map file')


def is_warm(config):
    """The cap and saved maps start near a critical point; flat and constant do not."""
    return config['init'] not in ('flat', 'constant')


def _checkpointer(artifacts, prefix='checkpoints/iter'):
    def save(iteration, u):
        for path in files.write_map(u, artifacts.path(f'{prefix}_{iteration:05d}.obj')):
            artifacts.add(path)
    return save


def _save_map(u, artifacts, name='map'):
    for path in files.write_map(u, artifacts.path(f'{name}.obj')):
        artifacts.add(path)


@click.group()
def cli():
    """Free-boundary constant mean curvature disk solver."""


@cli.command('solve')
@run_options
def solve_command(config, artifacts):
    """Solve for a critical point from the configured initializer."""
    params = config.energy_params()
    u0 = load_initial(config)
    solve_config = config.solve_config()
    if is_warm(config):
        solve_config = warm_start(solve_config)
    u, report = solve_critical_point(u0, params, solve_config, _checkpointer(artifacts))
    _save_map(u, artifacts)
    artifacts.add(files.write_iterations(report.history, artifacts.path('iterations.csv')))
    return report.to_dict()


@cli.command('continue')
@run_options
def continue_command(config, artifacts):
    """Epsilon or curvature continuation from the configured initializer."""
    solve_config = config.solve_config()
    solver = config.section('solver')
    u0 = load_initial(config)
    if solver['continuation'] == 'H':
        if not solver['H_values']:
            raise ConfigError('curvature continuation needs H_values')
        stages = continue_curvature(u0, config.energy_params(), solver['H_values'], solve_config,
                                    _checkpointer(artifacts), warm=is_warm(config))
        key = 'H'
    elif solver['continuation'] == 'epsilon':
        params = config.energy_params(epsilon=solve_config.eps_start)
        stages = continue_epsilon(u0, params, solve_config, callback=_checkpointer(artifacts),
                                  warm=is_warm(config))
        key = 'epsilon'
    else:
        raise ConfigError(f'unknown continuation {solver["continuation"]!r}')
    csv_path = artifacts.path('iterations.csv')
    for n, (value, _, report) in enumerate(stages):
        if n == 0:
            files.write_iterations(report.history, csv_path, {key: value})
        else:
            files.append_iterations(report.history, csv_path, {key: value})
    artifacts.add(csv_path)
    final = stages[-1][1]
    _save_map(final, artifacts)
    status = check_max_principle(final, config.energy_params(), solve_config)
    return {
        'stages': [{key: value, **report.to_dict()} for value, _, report in stages],
        'final_max_principle': status.status,
    }


@cli.command('minmax')
@run_options
def minmax_command(config, artifacts):
    """Mountain pass over the seed sweepout, plus the monotonicity sweep when r varies."""
    mesh = config.mesh()
    minmax = config.section('minmax')
    solve_config = config.solve_config()
    params = config.energy_params()
    seed = seed_sweepout(mesh, config.surface(), minmax['beads'], minmax['bulge'])
    path, top, level = mountain_pass(seed, params, solve_config)
    _save_map(top, artifacts, 'max_slice')
    results = {'level': level, 'levels': path.levels}
    if len(solve_config.r_grid) > 1:
        table = monotonicity_sweep(seed, params, solve_config)
        results['monotonicity'] = {'rows': table.rows, 'slopes': table.slopes,
                                   'flagged': table.flagged,
                                   'non_increasing': table.non_increasing,
                                   'errors': {repr(r): e for r, e in table.errors.items()}}
    return results


def spectral_results(u, config, artifacts=None):
    spectrum = config.section('spectrum')
    params = config.energy_params()
    frames = tangent_frames(u, spectrum['frame_rotation'])
    system = assemble_second_variation(u, params, frames)
    report = morse_index(system, spectrum['k'], zero_band=spectrum['zero_band'],
                         return_vectors=spectrum['eigenvectors'] > 0)
    results = {'energy': report.to_dict()}
    if not u.is_constant():
        try:
            area = morse_index(area_index_form(u, params.H), spectrum['k'],
                               zero_band=spectrum['zero_band'])
            results['area_form'] = area.to_dict()
        except BranchingError as e:
            logger.warning('area index form skipped: %s', e)
            results['area_form'] = {'error': str(e)}
    if artifacts is not None:
        fields = eigenvector_fields(system, report)[:spectrum['eigenvectors']]
        for j, field in enumerate(fields):
            scale = 0.1 / max(float(np.abs(field).max()), 1e-12)
            mode = u.positions + scale * field
            path = artifacts.path(f'modes/mode_{j:02d}.obj')
            with open(path, 'w') as f:
                export_obj(u.mesh, f, mode)
            artifacts.add(path)
    return results


@cli.command('spectrum')
@run_options
def spectrum_command(config, artifacts):
    """Morse index of a saved map (or of the configured initializer)."""
    u = load_initial(config)
    results = spectral_results(u, config, artifacts)
    artifacts.add(files.write_json(results, artifacts.path('spectrum.json')))
    return results


def quantization_check(u, params):
    """Swept volume of a cone path against the same path preceded by a reversed sweepout."""
    sweep = seed_sweepout(u.mesh, u.surface)
    south = sweep.beads[0].positions[0]
    direct = HomotopyPath.from_constant(u, base=south)
    around = sweep.reversed() + direct
    total = params.f.integral_over(u.surface)
    ratio = (swept_volume(around, params.f) - swept_volume(direct, params.f)) / total
    return ratio, abs(ratio - round(ratio)) <= 0.01


@cli.command('check')
@run_options
def check_command(config, artifacts):
    """Confinement, conformality, volume quantization, energy bound and index comparison."""
    u = load_initial(config)
    params = config.energy_params()
    solve_config = config.solve_config()
    checks_config = config.section('checks')
    checks = {}
    status = check_max_principle(u, params, solve_config)
    checks['max_principle'] = {'pass': status.passed, 'status': status.status,
                               'violation': status.violation, 'mesh_tol': status.mesh_tol}
    defect = hopf_defect(u)
    checks['hopf_defect'] = {'pass': defect <= checks_config['hopf_tol'], 'value': defect,
                             'tol': checks_config['hopf_tol']}
    if params.H > 0:
        try:
            ratio, ok = quantization_check(u, params)
            checks['volume_quantization'] = {'pass': ok, 'ratio': ratio}
        except (PathError, ProjectionError) as e:
            checks['volume_quantization'] = {'pass': False, 'error': str(e)}
        checks['hersch'] = hersch_bound_check(u, params.H, solve_config.mesh_tol_constant)
    index_b, index_e, passed = index_comparison_check(u, params, config.section('spectrum')['k'],
                                                      config.section('spectrum')['zero_band'])
    checks['index_comparison'] = {'pass': passed, 'index_area': index_b, 'index_energy': index_e}
    artifacts.add(files.write_json(checks, artifacts.path('checks.json')))
    return {name: bool(check['pass']) for name, check in checks.items()}


@cli.command('export')
@click.option('--format', 'fmt', type=click.Choice(['vtk', 'obj', 'both']), default='both')
@run_options
def export_command(config, artifacts, fmt):
    """Convert a saved map and the domain mesh to OBJ and VTK."""
    u = load_initial(config)
    if fmt in ('vtk', 'both'):
        artifacts.add(files.write_vtk(u, artifacts.path('map.vtk')))
    if fmt in ('obj', 'both'):
        _save_map(u, artifacts)
    for path in files.write_domain(u.mesh, artifacts.out_dir):
        artifacts.add(path)
    return {'vertices': u.mesh.n_vertices, 'triangles': u.mesh.n_triangles}
