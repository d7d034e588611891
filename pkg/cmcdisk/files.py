"""Map and report files: OBJ with a ``.bnd`` sidecar, CSV and JSON."""
import csv
import json
import os

import numpy as np

from cmcdisk.energy import SurfaceMap
from cmcdisk.errors import ConfigError
from cmcdisk.mesh import build_disk_mesh, export_obj, export_vtk

ITERATION_FIELDS = ['iter', 'E', 'D', 'residual', 'step', 'orth_defect', 'phase']


def write_map(u, path):
    """Write ``path`` (OBJ) and ``path`` with a ``.bnd`` suffix; returns both paths."""
    with open(path, 'w') as f:
        export_obj(u.mesh, f, u.positions)
    sidecar = os.path.splitext(path)[0] + '.bnd'
    with open(sidecar, 'w') as f:
        f.write(f'# level {u.mesh.level}\n')
        for index in u.mesh.boundary_loop:
            f.write(f'{index}\n')
    return path, sidecar


def read_map(path, surface):
    """Read a map written by :func:`write_map` back onto its rebuilt disk mesh."""
    sidecar = os.path.splitext(path)[0] + '.bnd'
    try:
        with open(sidecar) as f:
            header = f.readline().split()
            boundary = np.array([int(line) for line in f if line.strip()])
        level = int(header[2])
    except (OSError, ValueError, IndexError) as e:
        raise ConfigError(f'cannot read boundary sidecar {sidecar}: {e}') from e
    positions, faces = [], []
    try:
        with open(path) as f:
            for line in f:
                words = line.split()
                if not words:
                    continue
                if words[0] == 'v':
                    positions.append([float(w) for w in words[1:4]])
                elif words[0] == 'f':
                    faces.append([int(w.split('/')[0]) - 1 for w in words[1:4]])
    except (OSError, ValueError) as e:
        raise ConfigError(f'cannot read map {path}: {e}') from e
    mesh = build_disk_mesh(level)
    if (len(positions) != mesh.n_vertices or not np.array_equal(np.array(faces), mesh.triangles)
            or not np.array_equal(boundary, mesh.boundary_loop)):
        raise ConfigError(f'{path} does not match the level {level} disk mesh')
    return SurfaceMap(mesh, np.array(positions), surface)


def write_vtk(u, path, title='cmcdisk map'):
    with open(path, 'w') as f:
        export_vtk(u.mesh, f, u.positions, title)
    return path


def write_domain(mesh, directory):
    paths = []
    with open(os.path.join(directory, 'domain.obj'), 'w') as f:
        export_obj(mesh, f)
    paths.append(os.path.join(directory, 'domain.obj'))
    with open(os.path.join(directory, 'domain.vtk'), 'w') as f:
        export_vtk(mesh, f, title='cmcdisk domain')
    paths.append(os.path.join(directory, 'domain.vtk'))
    return paths


def write_iterations(history, path, extra=None):
    """Per-iteration CSV; ``extra`` maps additional column names to constant values."""
    extra = extra or {}
    fields = list(extra) + ITERATION_FIELDS
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator='\n')
        writer.writeheader()
        for row in history:
            writer.writerow({**extra, **{k: _fmt(row.get(k)) for k in ITERATION_FIELDS}})
    return path


def append_iterations(history, path, extra):
    with open(path, 'a', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(extra) + ITERATION_FIELDS, lineterminator='\n')
        for row in history:
            writer.writerow({**extra, **{k: _fmt(row.get(k)) for k in ITERATION_FIELDS}})
    return path


def _fmt(value):
    return repr(value) if isinstance(value, float) else value


def write_json(data, path):
    with open(path, 'w') as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value
