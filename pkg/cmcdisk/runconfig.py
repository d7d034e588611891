"""Run configuration: INI text with flag overrides, validated and hashed."""
import configparser
import hashlib
import json
import logging

from config import Config
from cmcdisk.energy import EnergyParams
from cmcdisk.errors import ConfigError, SurfaceError
from cmcdisk.mesh import build_disk_mesh
from cmcdisk.solver import SolveConfig
from cmcdisk.surface import build_f, make_barrier, parse_surface_spec

logger = logging.getLogger(__name__)

# Every key with its default, as text. Keys written before any section header
# belong to [run].
DEFAULTS = {
    'run': {
        'surface': 'sphere 1', 'barrier': '', 'H': '1.0', 'H0': '', 't0': '',
        'eps': '0', 'p': '2.2', 'level': '4', 'seed': '0', 'init': 'flat', 'noise': '1e-3',
    },
    'solver': {
        'grad_tol': '1e-8', 'max_iters': '200', 'strategy': 'auto', 'newton_switch_tol': '1e-2',
        'eps_start': '0.5', 'eps_ratio': '0.5', 'eps_floor': '1e-3', 'final_zero_stage': 'true',
        'checkpoint_every': '0', 'continuation': 'epsilon', 'H_values': '',
    },
    'minmax': {
        'beads': '40', 'bulge': '0', 'sweeps': '50', 'r_grid': '1.0', 'slope_bound': '10',
    },
    'spectrum': {
        'k': '12', 'zero_band': '1.0', 'frame_rotation': '0', 'eigenvectors': '0',
    },
    'checks': {
        'eta_num': '0.05', 'beta_num': '1e-4', 'mesh_tol_constant': '10', 'shrink_factor': '2',
        'hopf_tol': '5e-2',
    },
}

FLOATS = {'H', 'H0', 't0', 'eps', 'p', 'noise', 'grad_tol', 'newton_switch_tol', 'eps_start',
          'eps_ratio', 'eps_floor', 'bulge', 'slope_bound', 'zero_band', 'frame_rotation',
          'eta_num', 'beta_num', 'mesh_tol_constant', 'shrink_factor', 'hopf_tol'}
INTS = {'level', 'seed', 'max_iters', 'checkpoint_every', 'beads', 'sweeps', 'k', 'eigenvectors'}
BOOLS = {'final_zero_stage'}
FLOAT_LISTS = {'r_grid', 'H_values'}


def _convert(key, text):
    text = text.strip()
    try:
        if key in FLOATS:
            return float(text) if text else None
        if key in INTS:
            return int(text)
        if key in BOOLS:
            if text.lower() not in ('1', '0', 'true', 'false', 'yes', 'no', 'on', 'off'):
                raise ValueError(text)
            return text.lower() in ('1', 'true', 'yes', 'on')
        if key in FLOAT_LISTS:
            return [float(v) for v in text.replace(',', ' ').split()]
    except ValueError:
        raise ConfigError(f'malformed value for {key}: {text!r}') from None
    return text


def parse_config_text(text):
    parser = configparser.ConfigParser(interpolation=None, strict=False)
    parser.optionxform = str
    try:
        parser.read_string('[run]\n' + text)
    except configparser.Error as e:
        raise ConfigError(f'cannot parse run configuration: {e}') from e
    raw = {section: dict(values) for section, values in DEFAULTS.items()}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f'unknown section [{section}]')
        for key, value in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f'unknown key {key!r} in [{section}]')
            raw[section][key] = value
    return raw


class RunConfig:
    """Resolved run configuration; ``values`` holds typed values per section."""

    def __init__(self, raw=None, overrides=None):
        raw = raw or {section: dict(values) for section, values in DEFAULTS.items()}
        for key, value in (overrides or {}).items():
            if value is not None:
                raw['run'][key] = str(value)
        self.values = {section: {key: _convert(key, text) for key, text in entries.items()}
                       for section, entries in raw.items()}
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=None):
        text = ''
        if path is not None:
            try:
                with open(path) as f:
                    text = f.read()
            except OSError as e:
                raise ConfigError(f'cannot read config {path}: {e}') from e
        return cls(parse_config_text(text), overrides)

    def __getitem__(self, key):
        return self.values['run'][key]

    def section(self, name):
        return self.values[name]

    def validate(self):
        run = self.values['run']
        if not 0.0 <= run['eps'] <= 1.0:
            raise ConfigError(f'eps must lie in [0, 1], got {run["eps"]}')
        if run['p'] is None or run['p'] <= 2.0:
            raise ConfigError(f'p must exceed 2, got {run["p"]}')
        if run['H'] is None or run['H'] < 0.0:
            raise ConfigError(f'H must be nonnegative, got {run["H"]}')
        if not 0 <= run['level'] <= Config.MAX_REFINEMENT_LEVEL:
            raise ConfigError(f'level must lie in [0, {Config.MAX_REFINEMENT_LEVEL}], '
                              f'got {run["level"]}')
        if run['H0'] is not None and run['H'] > 0 and run['H'] >= run['H0']:
            raise ConfigError(f'H={run["H"]} violates the requirement H < H0={run["H0"]}')
        self.surface()
        self.solve_config()
        self.energy_params()

    def resolved(self):
        return {section: dict(sorted(values.items())) for section, values in sorted(self.values.items())}

    @property
    def config_hash(self):
        text = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def surface(self):
        return parse_surface_spec(self['surface'])

    def barrier_surface(self):
        return parse_surface_spec(self['barrier']) if self['barrier'] else self.surface()

    def mesh(self):
        return build_disk_mesh(self['level'])

    def energy_params(self, epsilon=None):
        run = self.values['run']
        eps = run['eps'] if epsilon is None else epsilon
        if run['H'] == 0.0:
            return EnergyParams(eps, run['p'], 0.0)
        try:
            barrier = make_barrier(self.barrier_surface(), run['H'], run['H0'], run['t0'])
            f = build_f(barrier)
            f.integral_over(self.surface())
        except SurfaceError as e:
            raise ConfigError(f'{e.message} (H < H0 required)') from e
        return EnergyParams(eps, run['p'], run['H'], f, barrier)

    def solve_config(self):
        solver, minmax, checks = (self.values[s] for s in ('solver', 'minmax', 'checks'))
        return SolveConfig(
            grad_tol=solver['grad_tol'], max_iters=solver['max_iters'],
            strategy=solver['strategy'], newton_switch_tol=solver['newton_switch_tol'],
            eps_start=solver['eps_start'], eps_ratio=solver['eps_ratio'],
            eps_floor=solver['eps_floor'], final_zero_stage=solver['final_zero_stage'],
            checkpoint_every=solver['checkpoint_every'], r_grid=tuple(minmax['r_grid']),
            slope_bound=minmax['slope_bound'], sweeps=minmax['sweeps'],
            eta_num=checks['eta_num'], beta_num=checks['beta_num'],
            shrink_factor=checks['shrink_factor'],
            mesh_tol_constant=checks['mesh_tol_constant'])

    def echo(self):
        """INI text of the resolved configuration."""
        lines = []
        for section, values in self.resolved().items():
            lines.append(f'[{section}]')
            for key, value in values.items():
                if isinstance(value, list):
                    value = ' '.join(repr(v) for v in value)
                lines.append(f'{key} = {"" if value is None else value}')
            lines.append('')
        return '\n'.join(lines)
