# Point the run ledger at an in-memory SQLite database and keep log files out
# of the source tree. Both must happen before anything imports config.py,
# because Config reads the environment once at import time.
import os
import tempfile
os.environ['DATABASE_URL'] = 'sqlite://'
os.environ['CMCDISK_LOG_DIR'] = tempfile.mkdtemp(prefix='cmcdisk-logs-')

import io
import json
import math
import shutil
import unittest
from unittest import mock

import numpy as np
from click.testing import CliRunner
from scipy.spatial import cKDTree

from cmcdisk import Session, engine
from cmcdisk import files
from cmcdisk.cli import cli
from cmcdisk.energy import (EnergyParams, HomotopyPath, SurfaceMap, bead_volume, check_admissible,
                            dirichlet, energy_gradient, energy_summary, first_variation,
                            hopf_defect, mean_curvature, perturbed_dirichlet, residual, retract,
                            swept_volume, tangent_projection, total_energy)
from cmcdisk.errors import (BranchingError, ConfigError, ContinuationError, ConvergenceError,
                            DegreeError, MeshError, PathError, ProjectionError, SurfaceError,
                            TangencyError, exit_code_for)
from cmcdisk.mesh import (boundary_lumped_length, build_disk_mesh, centroid_values, export_obj,
                          export_vtk, gradient, lumped_mass, refine, stiffness_matrix)
from cmcdisk.models import Base, Run, RunArtifact, recent_runs
from cmcdisk.runconfig import RunConfig, parse_config_text
from cmcdisk.solver import (COLLAPSE, NONCONSTANT, SolveConfig, _ball_energies, cap_geometry,
                            check_max_principle, classify, constant_map, continue_curvature,
                            continue_epsilon, detect_concentration, flat_disk, monotonicity_sweep,
                            mountain_pass, newton_step, orthogonal_cap, path_degree, seed_sweepout,
                            solve_critical_point, vertex_energies, warm_start)
from cmcdisk.spectrum import (area_index_form, assemble_second_variation, eigenvector_fields,
                              hersch_bound_check, index_comparison_check, morse_index,
                              normal_field, tangent_frames)
from cmcdisk.surface import (ConstantCurvature, Ellipsoid, Sphere, build_f, choose_t0,
                             make_barrier, offset_distance, parse_surface_spec)

CAP_AREA = 8.0 * math.pi * (1.0 - 2.0 / math.sqrt(5.0))


def cap_params(H=1.0, epsilon=0.0, p=2.2):
    """Energy parameters for the unit ball with the cutoff f built from its own barrier."""
    barrier = make_barrier(Sphere(1.0), H)
    return EnergyParams(epsilon, p, H, build_f(barrier), barrier)


def bubble(mesh, center, scale):
    """Inverse stereographic projection of ``(x - center) / scale``: a conformal bubble."""
    w = (mesh.vertices - np.asarray(center)) / scale
    r2 = np.sum(w * w, axis=1)
    positions = np.column_stack([2.0 * w[:, 0], 2.0 * w[:, 1], r2 - 1.0]) / (1.0 + r2)[:, None]
    return SurfaceMap(mesh, positions, Sphere(1.0))


class MeshCase(unittest.TestCase):
    def test_counts_and_topology(self):
        for level in range(4):
            mesh = build_disk_mesh(level)
            self.assertEqual(mesh.n_triangles, 8 * 4 ** level)
            self.assertEqual(len(mesh.boundary_loop), 8 * 2 ** level)
            # a triangulated disk has Euler characteristic V - E + F = 1
            self.assertEqual(mesh.euler_characteristic(), 1)
            self.assertEqual(mesh.level, level)

    def test_boundary_on_circle(self):
        mesh = build_disk_mesh(3)
        radii = np.linalg.norm(mesh.vertices[mesh.boundary_loop], axis=1)
        np.testing.assert_allclose(radii, 1.0, atol=1e-14)
        self.assertTrue(np.all(mesh.tri_area > 0.0))

    def test_refine_halves_mesh_size(self):
        coarse = build_disk_mesh(2)
        fine = refine(coarse)
        self.assertLess(fine.mesh_size_h, 0.6 * coarse.mesh_size_h)
        self.assertEqual(fine.n_vertices, coarse.n_vertices + len(coarse.edges()))

    def test_negative_level(self):
        with self.assertRaises(MeshError):
            build_disk_mesh(-1)

    def test_area_and_boundary_length(self):
        mesh = build_disk_mesh(4)
        n = len(mesh.boundary_loop)
        polygon = 0.5 * n * math.sin(2.0 * math.pi / n)
        self.assertAlmostEqual(mesh.area, polygon, places=12)
        self.assertAlmostEqual(mesh.boundary_length, 2.0 * n * math.sin(math.pi / n), places=12)
        self.assertAlmostEqual(lumped_mass(mesh).sum(), mesh.area, places=12)
        self.assertAlmostEqual(boundary_lumped_length(mesh).sum(), mesh.boundary_length, places=12)

    def test_gradient_of_linear_field(self):
        mesh = build_disk_mesh(2)
        field = np.column_stack([2.0 * mesh.vertices[:, 0] - mesh.vertices[:, 1],
                                 np.full(mesh.n_vertices, 3.0)])
        G = gradient(mesh, field)
        self.assertEqual(G.shape, (mesh.n_triangles, 2, 2))
        np.testing.assert_allclose(G[:, 0], np.tile([2.0, -1.0], (mesh.n_triangles, 1)), atol=1e-12)
        np.testing.assert_allclose(G[:, 1], 0.0, atol=1e-12)

    def test_centroid_values(self):
        mesh = build_disk_mesh(2)
        field = 3.0 * mesh.vertices[:, 0] + mesh.vertices[:, 1]
        centroids = mesh.vertices[mesh.triangles].mean(axis=1)
        np.testing.assert_allclose(centroid_values(mesh, field),
                                   3.0 * centroids[:, 0] + centroids[:, 1], atol=1e-14)
        with self.assertRaises(MeshError):
            centroid_values(mesh, field[:-1])

    def test_stiffness(self):
        mesh = build_disk_mesh(2)
        K = stiffness_matrix(mesh)
        np.testing.assert_allclose(K @ np.ones(mesh.n_vertices), 0.0, atol=1e-12)
        x = mesh.vertices[:, 0]
        # the Dirichlet integral of a linear function is |grad|^2 times the area
        self.assertAlmostEqual(x @ K @ x, mesh.area, places=12)
        self.assertAlmostEqual(abs(K - K.T).max(), 0.0)

    def test_arrays_are_read_only(self):
        mesh = build_disk_mesh(1)
        with self.assertRaises(ValueError):
            mesh.vertices[0, 0] = 1.0

    def test_exports(self):
        mesh = build_disk_mesh(1)
        obj = io.StringIO()
        export_obj(mesh, obj)
        lines = obj.getvalue().splitlines()
        self.assertEqual(sum(line.startswith('v ') for line in lines), mesh.n_vertices)
        self.assertEqual(sum(line.startswith('f ') for line in lines), mesh.n_triangles)
        self.assertNotIn('f 0', obj.getvalue())
        vtk = io.StringIO()
        export_vtk(mesh, vtk)
        text = vtk.getvalue()
        self.assertTrue(text.startswith('# vtk DataFile Version 3.0'))
        self.assertIn(f'CELLS {mesh.n_triangles} {4 * mesh.n_triangles}', text)


class SurfaceCase(unittest.TestCase):
    def test_sphere_projection(self):
        sphere = Sphere(1.0)
        y = np.array([[0.3, -0.2, 0.5], [1.2, 0.4, -0.9]])
        q = sphere.closest_point(y)
        np.testing.assert_allclose(q, y / np.linalg.norm(y, axis=1)[:, None], atol=1e-13)

    def test_ellipsoid_projection(self):
        ellipsoid = Ellipsoid(1.0, 0.8, 0.6)
        y = np.array([1.5, 0.3, -0.7])
        q = ellipsoid.closest_point(y)
        self.assertAlmostEqual(float(ellipsoid.phi(q)), 0.0, places=10)
        # the offset from the closest point is normal to the surface
        np.testing.assert_allclose(np.cross(y - q, ellipsoid.grad(q)), 0.0, atol=1e-10)

    def test_projection_range(self):
        with self.assertRaises(ProjectionError) as cm:
            Sphere(1.0).closest_point(np.array([3.0, 0.0, 0.0]))
        np.testing.assert_array_equal(cm.exception.point, [3.0, 0.0, 0.0])

    def test_second_fundamental_form(self):
        sphere = Sphere(2.0)
        q = np.array([0.0, 0.0, 2.0])
        v = np.array([1.0, 0.0, 0.0])
        eta = sphere.normal(q)
        np.testing.assert_allclose(eta, [0.0, 0.0, -1.0])
        self.assertAlmostEqual(float(sphere.second_fundamental_form(q, eta, v)), 0.5)
        with self.assertRaises(TangencyError):
            sphere.second_fundamental_form(q, eta, np.array([0.0, 0.0, 1.0]))

    def test_offset_curvatures(self):
        sphere = Sphere(1.0)
        q = sphere.sample_points(10)
        np.testing.assert_allclose(sphere.principal_curvatures(q), 1.0, atol=1e-12)
        np.testing.assert_allclose(sphere.mean_curvature(q, offset=0.2), 2.0 / 1.2, atol=1e-12)
        ellipsoid = Ellipsoid(2.0, 1.0, 1.0)
        kappa = ellipsoid.principal_curvatures(np.array([[2.0, 0.0, 0.0]]))
        np.testing.assert_allclose(kappa, [[2.0, 2.0]], atol=1e-12)

    def test_parse_surface_spec(self):
        self.assertIsInstance(parse_surface_spec('sphere 1'), Sphere)
        self.assertIsInstance(parse_surface_spec('ellipsoid 1 0.8 0.6'), Ellipsoid)
        for text in ('', 'torus 1 2', 'sphere x', 'sphere -1', 'ellipsoid 1 2'):
            with self.assertRaises(ConfigError):
                parse_surface_spec(text)

    def test_barrier(self):
        barrier = make_barrier(Sphere(1.0), 1.0)
        self.assertAlmostEqual(barrier.H0, 2.0, places=10)
        self.assertEqual(barrier.t0, 0.25)
        with self.assertRaises(SurfaceError):
            make_barrier(Sphere(1.0), 2.5)
        with self.assertRaises(SurfaceError):
            choose_t0(Sphere(1.0), 2.0, 2.0)

    def test_offset_distance(self):
        barrier = make_barrier(Sphere(1.0), 1.0)
        self.assertEqual(offset_distance(barrier, [0.0, 0.0, 0.5]), 0.0)
        self.assertAlmostEqual(offset_distance(barrier, [0.0, 2.0, 0.0]), 1.0, places=10)
        d = offset_distance(barrier, [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        np.testing.assert_allclose(d, [0.0, 2.0], atol=1e-10)

    def test_cutoff_profile(self):
        barrier = make_barrier(Sphere(1.0), 1.0)
        f = build_f(barrier)
        t0 = barrier.t0
        self.assertEqual(float(f(np.array([0.0, 0.0, 0.5]))), 1.0)
        self.assertEqual(float(f(np.array([0.0, 0.0, 1.0 + 0.2 * t0]))), 1.0)
        self.assertEqual(float(f(np.array([0.0, 0.0, 1.0 + 0.8 * t0]))), 0.0)
        d = np.linspace(0.0, t0, 2001)
        values = f.profile(d)
        self.assertTrue(np.all(np.diff(values) <= 1e-15))
        slope = np.abs(np.diff(values) / np.diff(d)).max()
        self.assertLessEqual(slope, f.lipschitz_bound * (1.0 + 1e-6))
        self.assertGreater(slope, 0.99 * f.lipschitz_bound)
        self.assertAlmostEqual(f.integral_over(Sphere(1.0)), 4.0 * math.pi / 3.0)
        self.assertAlmostEqual(f.scaled(0.5).H, 0.5)

    def test_cutoff_needs_enclosure(self):
        f = build_f(make_barrier(Sphere(1.0), 1.0))
        with self.assertRaises(SurfaceError):
            f.integral_over(Sphere(1.5))

    def test_constant_curvature(self):
        f = ConstantCurvature(0.7)
        np.testing.assert_allclose(f(np.zeros((4, 3))), 0.7)
        np.testing.assert_allclose(f.gradient(np.ones((2, 3))), 0.0)
        self.assertAlmostEqual(f.scaled(2.0).H, 1.4)


class EnergyCase(unittest.TestCase):
    def setUp(self):
        self.mesh = build_disk_mesh(2)
        self.sphere = Sphere(1.0)

    def test_flat_disk_energy(self):
        u = flat_disk(self.mesh, self.sphere)
        # the identity map is conformal, so its Dirichlet energy is the area
        self.assertAlmostEqual(dirichlet(u), self.mesh.area, places=12)
        self.assertAlmostEqual(hopf_defect(u), 0.0, places=12)
        res = residual(u, EnergyParams())
        self.assertLess(res.norm, 1e-10)
        self.assertLess(res.orthogonality_defect, 1e-10)
        self.assertGreater(perturbed_dirichlet(u, 0.5), dirichlet(u))

    def test_boundary_must_lie_on_surface(self):
        positions = np.zeros((self.mesh.n_vertices, 3))
        with self.assertRaises(PathError):
            SurfaceMap(self.mesh, positions, self.sphere)
        with self.assertRaises(PathError):
            SurfaceMap(self.mesh, positions[:-1], self.sphere)

    def test_params_validation(self):
        for kwargs in ({'p': 2.0}, {'epsilon': 1.5}, {'H': -1.0}):
            with self.assertRaises(ConfigError) as cm:
                EnergyParams(**kwargs)
            self.assertEqual(exit_code_for(cm.exception), 3)
        params = EnergyParams(0.1, 2.5, 1.0)
        self.assertAlmostEqual(params.coupling, 0.1 ** 0.5)
        self.assertAlmostEqual(params.scaled(0.5).H, 0.5)
        self.assertAlmostEqual(params.scaled(0.5).f.H, 0.5)

    def test_admissibility(self):
        u = orthogonal_cap(self.mesh, self.sphere, 1.0)
        psi = np.zeros((self.mesh.n_vertices, 3))
        psi[self.mesh.boundary_loop] = u.boundary_positions
        with self.assertRaises(TangencyError):
            check_admissible(u, psi)
        check_admissible(u, tangent_projection(u, psi))

    def test_first_variation_matches_finite_differences(self):
        # The first variation must be the derivative of the total energy along
        # the boundary-retracted curve t -> u + t psi.
        u = orthogonal_cap(self.mesh, self.sphere, 1.0)
        params = cap_params(epsilon=0.1)
        rng = np.random.default_rng(11)
        t = 1e-5

        def local(v):
            return perturbed_dirichlet(v, params.epsilon, params.p) + bead_volume(u, v, params.f)

        for _ in range(10):
            psi = tangent_projection(u, rng.standard_normal((self.mesh.n_vertices, 3)))
            exact = first_variation(u, psi, params)
            approx = (local(retract(u, psi, t)) - local(retract(u, psi, -t))) / (2.0 * t)
            self.assertLessEqual(abs(exact - approx), 1e-6 * max(1.0, abs(exact)))

    def test_energy_gradient_of_flat_disk(self):
        # linear maps are discretely harmonic, so only the boundary rows survive,
        # and those point along the outward normal of the sphere
        u = flat_disk(self.mesh, self.sphere)
        g = energy_gradient(u, EnergyParams())
        np.testing.assert_allclose(g[self.mesh.interior], 0.0, atol=1e-12)
        np.testing.assert_allclose(tangent_projection(u, g), 0.0, atol=1e-12)
        psi = tangent_projection(u, np.random.default_rng(2).standard_normal(g.shape))
        self.assertAlmostEqual(first_variation(u, psi, EnergyParams()), float(np.sum(g * psi)))

    def test_cap_geometry(self):
        cap = cap_geometry(1.0)
        self.assertAlmostEqual(cap.rho, 2.0)
        self.assertAlmostEqual(cap.d, math.sqrt(5.0))
        self.assertAlmostEqual(cap.area, CAP_AREA, places=12)
        self.assertAlmostEqual(CAP_AREA, 2.653, places=3)

    def test_cap_initializer_is_nearly_conformal(self):
        u = orthogonal_cap(build_disk_mesh(3), self.sphere, 1.0)
        self.assertAlmostEqual(dirichlet(u), CAP_AREA, delta=0.02 * CAP_AREA)
        self.assertLess(hopf_defect(u), 5e-2)

    def test_paths(self):
        u = orthogonal_cap(self.mesh, self.sphere, 1.0)
        path = HomotopyPath.from_constant(u)
        self.assertTrue(path[0].is_constant())
        self.assertIs(path.end, u)
        self.assertLessEqual(path.check_spacing().max(), path.bead_spacing_cap)
        with self.assertRaises(PathError):
            path.reversed()
        with self.assertRaises(PathError):
            HomotopyPath([u])
        summary = energy_summary(u, cap_params())
        self.assertAlmostEqual(summary['E'], total_energy(u, path, cap_params()), places=8)
        with self.assertRaises(PathError):
            total_energy(flat_disk(self.mesh, self.sphere), path, cap_params())

    def test_volume_quantization(self):
        # Two paths from constant maps to the same cap differ by a whole number
        # of enclosed volumes: one cone comes from above, one from below.
        mesh = build_disk_mesh(3)
        u = orthogonal_cap(mesh, self.sphere, 1.0)
        params = cap_params()
        total = params.f.integral_over(self.sphere)
        north = HomotopyPath.from_constant(u, base=np.array([0.0, 0.0, 1.0]))
        south = HomotopyPath.from_constant(u, base=np.array([0.0, 0.0, -1.0]))
        tilted = HomotopyPath.from_constant(u, base=self.sphere.radial_point(np.array([0.3, -0.2, 1.0])))
        ratio = (swept_volume(north, params.f) - swept_volume(south, params.f)) / total
        self.assertAlmostEqual(ratio, round(ratio), delta=0.01)
        self.assertEqual(abs(round(ratio)), 1)
        ratio = (swept_volume(north, params.f) - swept_volume(tilted, params.f)) / total
        self.assertAlmostEqual(ratio, 0.0, delta=0.01)

    def test_volume_quantization_over_random_bases(self):
        mesh = build_disk_mesh(3)
        u = orthogonal_cap(mesh, self.sphere, 1.0)
        params = cap_params()
        total = params.f.integral_over(self.sphere)
        sweep = seed_sweepout(mesh, self.sphere)
        south = sweep.beads[0].positions[0]
        direct = HomotopyPath.from_constant(u, base=south)
        references = [swept_volume(direct, params.f),
                      swept_volume(sweep.reversed() + direct, params.f)]
        rng = np.random.default_rng(20)
        for k in range(20):
            base = rng.standard_normal(3)
            path = HomotopyPath.from_constant(u, base=base / np.linalg.norm(base))
            self.assertTrue(path[0].is_constant())
            self.assertIs(path.end, u)
            ratio = (swept_volume(path, params.f) - references[k % 2]) / total
            self.assertAlmostEqual(ratio, round(ratio), delta=0.01)

    def test_swept_volume_reversal_and_additivity(self):
        mesh = build_disk_mesh(2)
        u = orthogonal_cap(mesh, self.sphere, 1.0)
        f = cap_params().f
        sweep = seed_sweepout(mesh, self.sphere)
        forward = swept_volume(sweep, f)
        self.assertAlmostEqual(swept_volume(sweep.reversed(), f), -forward, places=12)
        direct = HomotopyPath.from_constant(u, base=sweep.beads[0].positions[0])
        joined = swept_volume(sweep.reversed() + direct, f)
        self.assertAlmostEqual(joined, swept_volume(sweep.reversed(), f) + swept_volume(direct, f),
                               places=12)

    def test_sweepout_encloses_ball_volume(self):
        sweep = seed_sweepout(build_disk_mesh(4), self.sphere, beads=40)
        volume = swept_volume(sweep, ConstantCurvature(1.0))
        self.assertAlmostEqual(volume, 4.0 * math.pi / 3.0, delta=0.01 * 4.0 * math.pi / 3.0)


class SolverCase(unittest.TestCase):
    def setUp(self):
        self.sphere = Sphere(1.0)

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            SolveConfig(strategy='bfgs')
        with self.assertRaises(ConfigError):
            SolveConfig(eps_ratio=1.5)
        with self.assertRaises(ConfigError):
            SolveConfig(r_grid=(0.5, 1.2))

    def test_epsilon_schedule(self):
        config = SolveConfig(eps_start=0.5, eps_ratio=0.5, eps_floor=0.1)
        self.assertEqual(config.epsilon_schedule(), [0.5, 0.25, 0.125, 0.1, 0.0])
        config = SolveConfig(eps_floor=0.1, final_zero_stage=False)
        self.assertEqual(config.epsilon_schedule(0.2), [0.2, 0.1])

    def test_flat_disk_benchmark(self):
        mesh = build_disk_mesh(3)
        u0 = flat_disk(mesh, self.sphere, noise=1e-3, seed=7)
        u, report = solve_critical_point(u0, EnergyParams(), SolveConfig(grad_tol=1e-7))
        self.assertTrue(report.converged)
        self.assertEqual(report.label, NONCONSTANT)
        self.assertAlmostEqual(report.energies['D'], math.pi, delta=0.02 * math.pi)
        self.assertLessEqual(report.orth_defect, 1e-3)
        self.assertLessEqual(report.hopf_defect, 5e-2)
        # the flat disk stays in the equatorial plane
        np.testing.assert_allclose(u.positions[:, 2], 0.0, atol=1e-12)
        self.assertEqual(report.history[0]['phase'], 'start')
        self.assertEqual(report.history[-1]['iter'], report.iterations)

    def test_cap_benchmark(self):
        mesh = build_disk_mesh(3)
        params = cap_params()
        u, report = solve_critical_point(orthogonal_cap(mesh, self.sphere, 1.0), params,
                                         SolveConfig(grad_tol=1e-7, strategy='newton'))
        self.assertTrue(report.converged)
        self.assertAlmostEqual(report.energies['D'], CAP_AREA, delta=0.02 * CAP_AREA)
        H = mean_curvature(u)[mesh.interior]
        np.testing.assert_allclose(H, 1.0, rtol=0.02)
        self.assertEqual(report.max_principle, 'pass_b')
        hersch = hersch_bound_check(u, 1.0)
        self.assertTrue(hersch['pass'])
        self.assertTrue(hersch['confined'])

    def test_checkpoints(self):
        saved = []
        mesh = build_disk_mesh(2)
        u0 = flat_disk(mesh, self.sphere, noise=1e-2, seed=1)
        config = SolveConfig(grad_tol=1e-6, checkpoint_every=1, strategy='descent', max_iters=500)
        _, report = solve_critical_point(u0, EnergyParams(), config,
                                         lambda it, u: saved.append(it))
        self.assertEqual(saved, list(range(1, report.iterations + 1)))

    def test_convergence_error_carries_report(self):
        mesh = build_disk_mesh(2)
        u0 = flat_disk(mesh, self.sphere, noise=1e-2, seed=3)
        with self.assertRaises(ConvergenceError) as cm:
            solve_critical_point(u0, EnergyParams(), SolveConfig(grad_tol=1e-14, max_iters=1))
        self.assertFalse(cm.exception.report.converged)
        self.assertEqual(exit_code_for(cm.exception), 2)

    def test_collapse_label(self):
        u = constant_map(build_disk_mesh(2), self.sphere)
        self.assertEqual(classify(u, SolveConfig()), COLLAPSE)
        _, report = solve_critical_point(u, EnergyParams())
        self.assertEqual(report.iterations, 0)
        self.assertEqual(report.label, COLLAPSE)

    def test_epsilon_continuation(self):
        mesh = build_disk_mesh(2)
        u0 = flat_disk(mesh, self.sphere, noise=1e-3, seed=2)
        stages = continue_epsilon(u0, EnergyParams(0.1), SolveConfig(grad_tol=1e-7),
                                  schedule=[0.1, 0.01, 0.0])
        self.assertEqual([eps for eps, _, _ in stages], [0.1, 0.01, 0.0])
        self.assertTrue(all(report.converged for _, _, report in stages))
        self.assertFalse(stages[-1][2].concentration.detected)
        with self.assertRaises(ConfigError):
            continue_epsilon(u0, EnergyParams(0.1), schedule=[0.01, 0.1])

    def test_cap_epsilon_continuation(self):
        # Starting on the cap, every stage stays on the cap branch down to epsilon = 0.
        mesh = build_disk_mesh(3)
        params = cap_params(epsilon=0.5)
        config = SolveConfig(grad_tol=1e-7, eps_ratio=0.25)
        stages = continue_epsilon(orthogonal_cap(mesh, self.sphere, 1.0), params, config, warm=True)
        self.assertEqual([eps for eps, _, _ in stages][-2:], [1e-3, 0.0])
        self.assertTrue(all(report.label == NONCONSTANT for _, _, report in stages))
        u, report = stages[-1][1:]
        self.assertAlmostEqual(report.energies['D'], CAP_AREA, delta=0.02 * CAP_AREA)
        self.assertEqual(report.max_principle, 'pass_b')
        self.assertTrue(hersch_bound_check(u, 1.0)['pass'])
        index_area, _, passed = index_comparison_check(u, params.with_epsilon(0.0))
        self.assertGreaterEqual(index_area, 1)
        self.assertTrue(passed)

    def test_newton_step_accepts_on_residual(self):
        mesh = build_disk_mesh(2)
        params = cap_params()
        u = orthogonal_cap(mesh, self.sphere, 1.0)
        current = residual(u, params)
        v, alpha, _ = newton_step(u, params, SolveConfig(), current)
        self.assertGreater(alpha, 0.0)
        self.assertLess(residual(v, params).norm, current.norm)

    def test_warm_start_uses_newton(self):
        self.assertEqual(warm_start(SolveConfig()).strategy, 'newton')
        self.assertEqual(warm_start(SolveConfig(strategy='descent')).strategy, 'descent')

    def test_failed_continuation_keeps_finished_stages(self):
        mesh = build_disk_mesh(2)
        u0 = flat_disk(mesh, self.sphere, noise=1e-2, seed=2)
        with self.assertRaises(ContinuationError) as cm:
            continue_epsilon(u0, EnergyParams(0.1), SolveConfig(grad_tol=1e-14, max_iters=1),
                             schedule=[0.1, 0.0])
        self.assertEqual(cm.exception.stages, [])

    def test_curvature_continuation(self):
        mesh = build_disk_mesh(2)
        stages = continue_curvature(flat_disk(mesh, self.sphere), EnergyParams(), [0.0, 0.0])
        self.assertEqual(len(stages), 2)
        self.assertEqual(stages[-1][2].iterations, 0)

    def test_max_principle(self):
        mesh = build_disk_mesh(2)
        params = cap_params()
        config = SolveConfig(mesh_tol_constant=1e-3)
        u = orthogonal_cap(mesh, self.sphere, 1.0)
        self.assertEqual(check_max_principle(u, params, config).status, 'pass_b')
        for lift, expected in ((1.1, 'pass_a'), (1.5, 'fail')):
            positions = np.array(u.positions)
            positions[0] = [0.0, 0.0, lift]
            result = check_max_principle(u.with_positions(positions), params, config)
            self.assertEqual(result.status, expected)
        self.assertFalse(result.passed)

    def test_sweepout_degree(self):
        mesh = build_disk_mesh(2)
        params = cap_params()
        path = seed_sweepout(mesh, self.sphere)
        self.assertTrue(path[0].is_constant())
        self.assertTrue(path.ends_constant())
        degree, ratio = path_degree(path, params, SolveConfig())
        self.assertEqual(degree, 1)
        self.assertAlmostEqual(ratio, 1.0, delta=0.05)
        self.assertEqual(path_degree(path.reversed(), params, SolveConfig())[0], -1)
        with self.assertRaises(DegreeError):
            mountain_pass(path.reversed(), params)

    def test_mountain_pass_levels_do_not_increase(self):
        mesh = build_disk_mesh(2)
        path0 = seed_sweepout(mesh, self.sphere)
        path, top, level = mountain_pass(path0, cap_params(), SolveConfig(sweeps=3, polish=False))
        self.assertTrue(all(b <= a * (1.0 + 1e-12) for a, b in zip(path.levels, path.levels[1:])))
        self.assertEqual(level, path.levels[-1])
        self.assertFalse(top.is_constant())

    def test_mountain_pass_matches_direct_cap(self):
        mesh = build_disk_mesh(3)
        params = cap_params()
        config = SolveConfig(grad_tol=1e-7)
        _, direct = solve_critical_point(orthogonal_cap(mesh, self.sphere, 1.0), params,
                                         warm_start(config))
        path, top, level = mountain_pass(seed_sweepout(mesh, self.sphere), params, config)
        self.assertTrue(all(b <= a * (1.0 + 1e-12) for a, b in zip(path.levels, path.levels[1:])))
        self.assertAlmostEqual(dirichlet(top), direct.energies['D'], delta=0.03 * direct.energies['D'])

    def test_monotonicity_sweep(self):
        mesh = build_disk_mesh(2)
        path0 = seed_sweepout(mesh, self.sphere)
        config = SolveConfig(sweeps=2, polish=False, r_grid=(1.0, 0.5))
        table = monotonicity_sweep(path0, cap_params(), config)
        self.assertEqual(len(table.rows) + len(table.errors), 2)
        self.assertEqual([row['r'] for row in table.rows], sorted(row['r'] for row in table.rows))
        for row in table.rows:
            self.assertAlmostEqual(row['omega_over_r'], row['omega'] / row['r'])
        self.assertEqual(len(table.rows), 2, table.errors)
        self.assertEqual(len(table.slopes), 1)
        self.assertTrue(table.non_increasing)
        self.assertGreaterEqual(table.rows[0]['omega_over_r'], table.rows[1]['omega_over_r'])

    def test_interior_bubbles_concentrate(self):
        # A family of shrinking conformal bubbles centered at the origin: the
        # detected scale must shrink with the bubble and stay centered.
        mesh = build_disk_mesh(4)
        sequence = [(eps, bubble(mesh, (0.0, 0.0), scale))
                    for eps, scale in ((0.3, 2.4), (0.2, 1.2), (0.1, 0.6))]
        report = detect_concentration(sequence, eta=2.0)
        self.assertTrue(report.detected)
        self.assertEqual(len(report.scales), 3)
        self.assertTrue(all(b < a for a, b in zip(report.scales, report.scales[1:])))
        # wide bubbles are too flat to pin down a center; the narrowest one is not
        self.assertLessEqual(np.linalg.norm(report.centers[-1]), 2.0 * mesh.mesh_size_h)

    def test_boundary_bubble_concentrates_at_boundary(self):
        mesh = build_disk_mesh(4)
        sequence = [(eps, bubble(mesh, (1.0, 0.0), scale))
                    for eps, scale in ((0.3, 1.6), (0.2, 0.8), (0.1, 0.4))]
        report = detect_concentration(sequence, eta=2.0)
        self.assertTrue(report.detected)
        self.assertTrue(all(b < a for a, b in zip(report.scales, report.scales[1:])))
        self.assertLessEqual(report.boundary_distances[-1], 2.0 * report.scales[-1])

    def test_ball_energies_in_blocks(self):
        mesh = build_disk_mesh(3)
        energy = vertex_energies(bubble(mesh, [0.2, -0.1], 0.3))
        tree = cKDTree(mesh.vertices)
        dist = np.linalg.norm(mesh.vertices[:, None, :] - mesh.vertices[None, :, :], axis=2)
        for radius in (mesh.mesh_size_h, 0.25, 0.5):
            expected = (dist <= radius) @ energy
            np.testing.assert_allclose(_ball_energies(tree, energy, radius), expected, rtol=1e-12)
            np.testing.assert_allclose(_ball_energies(tree, energy, radius, budget=50), expected,
                                       rtol=1e-12)

    def test_no_concentration_on_flat_sequence(self):
        mesh = build_disk_mesh(3)
        u = flat_disk(mesh, self.sphere)
        report = detect_concentration([(0.1, u), (0.01, u)])
        self.assertFalse(report.detected)


class SpectrumCase(unittest.TestCase):
    def setUp(self):
        self.mesh = build_disk_mesh(3)
        self.flat = flat_disk(self.mesh, Sphere(1.0))

    def test_flat_disk_index(self):
        # The constant vertical displacement lowers the energy (Steklov
        # eigenvalue 0 against boundary curvature 1); the linear vertical
        # modes are neutral.
        report = morse_index(assemble_second_variation(self.flat, EnergyParams()))
        self.assertEqual(report.index, 1)
        self.assertGreaterEqual(report.nullity, 2)
        self.assertEqual(report.dof_count, 3 * len(self.mesh.interior) + 2 * len(self.mesh.boundary_loop))
        data = json.loads(report.to_json())
        self.assertEqual(data['index'], 1)

    def test_frame_rotation_does_not_change_spectrum(self):
        params = EnergyParams()
        plain = morse_index(assemble_second_variation(self.flat, params))
        rotated = morse_index(assemble_second_variation(
            self.flat, params, tangent_frames(self.flat, rotation=0.7)))
        np.testing.assert_allclose(plain.eigenvalues, rotated.eigenvalues, atol=1e-9)

    def test_hessian_matches_second_differences(self):
        mesh = build_disk_mesh(2)
        u = orthogonal_cap(mesh, Sphere(1.0), 1.0)
        params = cap_params(epsilon=0.1)
        system = assemble_second_variation(u, params)
        rng = np.random.default_rng(5)
        t = 1e-4

        def local(s, psi):
            v = retract(u, psi, s)
            return perturbed_dirichlet(v, params.epsilon, params.p) + bead_volume(u, v, params.f)

        base = perturbed_dirichlet(u, params.epsilon, params.p)
        for _ in range(5):
            x = rng.standard_normal(system.dof_count)
            psi = system.embed(x)
            scale = 1.0 / np.abs(psi).max()
            x, psi = scale * x, scale * psi
            second = (local(t, psi) + local(-t, psi) - 2.0 * base) / t ** 2
            exact = system.quadratic_form(x)
            self.assertLessEqual(abs(second - exact), 1e-5 * max(1.0, abs(exact)))

    def test_flat_disk_index_does_not_grow_with_epsilon(self):
        indices = [morse_index(assemble_second_variation(self.flat, EnergyParams(eps))).index
                   for eps in (0.0, 0.1, 0.5)]
        self.assertEqual(indices[0], 1)
        self.assertTrue(all(b <= a for a, b in zip(indices, indices[1:])), indices)

    def test_normal_field(self):
        field = normal_field(self.flat)
        np.testing.assert_allclose(np.abs(field.normals[:, 2]), 1.0, atol=1e-12)
        self.assertEqual(len(field.branched), 0)
        with self.assertRaises(BranchingError):
            normal_field(constant_map(self.mesh, Sphere(1.0)))

    def test_eigenvector_fields(self):
        system = assemble_second_variation(self.flat, EnergyParams())
        report = morse_index(system, k=4, return_vectors=True)
        fields = eigenvector_fields(system, report)
        self.assertEqual(len(fields), 4)
        b = self.mesh.boundary_loop
        for field in fields:
            self.assertEqual(field.shape, (self.mesh.n_vertices, 3))
            # boundary displacements stay tangent to the sphere
            np.testing.assert_allclose(np.sum(field[b] * self.flat.positions[b], axis=1), 0.0,
                                       atol=1e-10)
        self.assertEqual(eigenvector_fields(system, morse_index(system, k=4)), [])

    def test_area_form_of_flat_disk(self):
        system = area_index_form(self.flat, 0.0)
        ones = np.ones(self.mesh.n_vertices)
        self.assertAlmostEqual(system.quadratic_form(ones), -2.0 * math.pi, delta=0.02 * 2.0 * math.pi)
        self.assertEqual(morse_index(system).index, 1)

    def test_index_comparison(self):
        self.assertEqual(index_comparison_check(self.flat, EnergyParams()), (1, 1, True))

    def test_planted_index_comparison_failure(self):
        # Dropping the boundary curvature term makes the energy Hessian blind
        # to the destabilizing vertical mode, so the comparison must fail.
        with mock.patch('cmcdisk.spectrum._boundary_curvature_block',
                        side_effect=lambda u, g: np.zeros((len(u.mesh.boundary_loop), 3, 3))):
            index_b, index_e, passed = index_comparison_check(self.flat, EnergyParams())
        self.assertEqual((index_b, index_e), (1, 0))
        self.assertFalse(passed)

    def test_hersch_bound(self):
        result = hersch_bound_check(self.flat, 1.0)
        self.assertTrue(result['pass'])
        self.assertAlmostEqual(result['bound'], 16.0 * math.pi)
        # at H = 4.5 the bound 16 pi / H^2 drops below the disk's area
        result = hersch_bound_check(self.flat, 4.5)
        self.assertFalse(result['pass'])
        self.assertLess(result['margin'], 0.0)


class RunConfigCase(unittest.TestCase):
    def test_defaults(self):
        config = RunConfig()
        self.assertEqual(config['surface'], 'sphere 1')
        self.assertEqual(config['level'], 4)
        self.assertEqual(config.section('minmax')['r_grid'], [1.0])
        self.assertTrue(config.section('solver')['final_zero_stage'])
        self.assertEqual(len(config.config_hash), 16)

    def test_sections_and_overrides(self):
        raw = parse_config_text('H = 0.5\nlevel = 2\n\n[solver]\nmax_iters = 10\n')
        config = RunConfig(raw, {'level': 3, 'seed': None})
        self.assertEqual(config['H'], 0.5)
        self.assertEqual(config['level'], 3)
        self.assertEqual(config.section('solver')['max_iters'], 10)
        self.assertEqual(config.solve_config().max_iters, 10)

    def test_hash_tracks_values(self):
        a = RunConfig(overrides={'seed': 1})
        self.assertEqual(a.config_hash, RunConfig(overrides={'seed': 1}).config_hash)
        self.assertNotEqual(a.config_hash, RunConfig(overrides={'seed': 2}).config_hash)
        echoed = RunConfig(parse_config_text(a.echo()))
        self.assertEqual(echoed.config_hash, a.config_hash)

    def test_rejects_bad_input(self):
        for text in ('colour = red\n', '[plots]\nx = 1\n', 'H = abc\n', 'p = 2.0\n',
                     'eps = 2\n', 'level = 99\n', 'H = 3\nH0 = 2\n', 'surface = torus\n'):
            with self.assertRaises(ConfigError, msg=text):
                RunConfig(parse_config_text(text))

    def test_curvature_above_barrier(self):
        # the unit sphere's barrier curvature is 2: H = 2.5 has no admissible cutoff
        with self.assertRaises(ConfigError) as cm:
            RunConfig(overrides={'H': 2.5})
        self.assertEqual(exit_code_for(cm.exception), 3)


class FilesCase(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_map_files(self):
        u = orthogonal_cap(build_disk_mesh(2), Sphere(1.0), 1.0)
        obj, bnd = files.write_map(u, os.path.join(self.dir, 'map.obj'))
        self.assertTrue(bnd.endswith('map.bnd'))
        v = files.read_map(obj, Sphere(1.0))
        np.testing.assert_array_equal(v.positions, u.positions)
        self.assertEqual(v.mesh.level, 2)
        with open(bnd, 'w') as f:
            f.write('# level 3\n')
        with self.assertRaises(ConfigError):
            files.read_map(obj, Sphere(1.0))

    def test_reports(self):
        path = files.write_json({'b': np.float64(1.5), 'a': np.arange(2), 'c': float('nan')},
                                os.path.join(self.dir, 'x.json'))
        with open(path) as f:
            self.assertEqual(json.load(f), {'a': [0, 1], 'b': 1.5, 'c': None})
        history = [{'iter': 0, 'E': 1.0, 'D': 1.0, 'residual': 0.1, 'step': 0.0,
                    'orth_defect': 0.0, 'phase': 'start'}]
        csv_path = files.write_iterations(history, os.path.join(self.dir, 'it.csv'), {'epsilon': 0.1})
        files.append_iterations(history, csv_path, {'epsilon': 0.0})
        with open(csv_path) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], 'epsilon,iter,E,D,residual,step,orth_defect,phase')
        self.assertEqual(len(lines), 3)


class LedgerCase(unittest.TestCase):
    # Each test gets a fresh set of ledger tables in the in-memory database.
    def setUp(self):
        Base.metadata.create_all(engine)

    def tearDown(self):
        Base.metadata.drop_all(engine)

    def test_run_with_artifacts(self):
        with Session() as session:
            run = Run(subcommand='solve', config_hash='0123456789abcdef', out_dir='/tmp/x')
            session.add(run)
            session.add(RunArtifact(run=run, name='summary.json', path='/tmp/x/summary.json'))
            session.add(RunArtifact(run=run, name='map.obj', path='/tmp/x/map.obj'))
            session.commit()
            # status defaults to 'running' until the command finishes
            self.assertEqual(run.status, 'running')
            self.assertEqual(run.artifact_names(session), ['map.obj', 'summary.json'])
            run.finish(2)
            session.commit()
            self.assertEqual(run.status, 'failed')
            self.assertIsNotNone(run.finished_at)

    def test_recent_runs(self):
        with Session() as session:
            for subcommand in ('solve', 'spectrum', 'solve'):
                session.add(Run(subcommand=subcommand, config_hash='', out_dir='.'))
            session.commit()
            self.assertEqual(len(recent_runs(session)), 3)
            self.assertEqual(len(recent_runs(session, 'solve')), 2)


class CliCase(unittest.TestCase):
    def setUp(self):
        Base.metadata.create_all(engine)
        self.dir = tempfile.mkdtemp()
        self.runner = CliRunner()
        self.config = os.path.join(self.dir, 'run.cfg')
        with open(self.config, 'w') as f:
            f.write('H = 0\nlevel = 2\nnoise = 1e-3\n\n[solver]\ngrad_tol = 1e-7\n')

    def tearDown(self):
        Base.metadata.drop_all(engine)
        shutil.rmtree(self.dir)

    def invoke(self, *args):
        return self.runner.invoke(cli, list(args), catch_exceptions=False)

    def read_json(self, *parts):
        with open(os.path.join(self.dir, *parts)) as f:
            return json.load(f)

    def test_solve_is_reproducible(self):
        for name in ('a', 'b'):
            result = self.invoke('solve', '--config', self.config, '--out', os.path.join(self.dir, name))
            self.assertEqual(result.exit_code, 0, result.output)
        summary = self.read_json('a', 'summary.json')
        self.assertEqual(summary['schema'], 1)
        self.assertEqual(summary['subcommand'], 'solve')
        self.assertTrue(summary['results']['converged'])
        for name in ('iterations.csv', 'map.obj', 'map.bnd', 'timing.json'):
            self.assertIn(name, summary['artifacts'])
        with open(os.path.join(self.dir, 'a', 'summary.json'), 'rb') as a, \
                open(os.path.join(self.dir, 'b', 'summary.json'), 'rb') as b:
            self.assertEqual(a.read(), b.read())
        with Session() as session:
            runs = recent_runs(session, 'solve')
            self.assertEqual([run.status for run in runs], ['ok', 'ok'])
            self.assertIn('summary.json', runs[0].artifact_names(session))

    def test_config_error_exit_status(self):
        result = self.invoke('solve', '--config', self.config, '--p', '1.5',
                             '--out', os.path.join(self.dir, 'bad'))
        self.assertEqual(result.exit_code, 3)
        with Session() as session:
            self.assertEqual(recent_runs(session)[0].status, 'failed')

    def test_convergence_error_exit_status(self):
        with open(self.config, 'a') as f:
            f.write('max_iters = 1\ngrad_tol = 1e-14\n')
        result = self.invoke('solve', '--config', self.config, '--out', os.path.join(self.dir, 'slow'))
        self.assertEqual(result.exit_code, 2)
        self.assertIn('[config ', result.output)

    def test_unexpected_error_closes_ledger_row(self):
        with mock.patch('cmcdisk.cli.solve_critical_point', side_effect=FloatingPointError('overflow')):
            result = self.runner.invoke(cli, ['solve', '--config', self.config,
                                              '--out', os.path.join(self.dir, 'crash')])
        self.assertEqual(result.exit_code, 1)
        self.assertIsInstance(result.exception, FloatingPointError)
        with Session() as session:
            run = recent_runs(session, 'solve')[0]
            self.assertEqual(run.status, 'failed')
            self.assertEqual(run.exit_code, 1)
            self.assertTrue(run.config_hash)

    def test_continue_from_cap_stays_nonconstant(self):
        with open(self.config, 'w') as f:
            f.write('H = 1\nlevel = 3\ninit = cap\n\n[solver]\ngrad_tol = 1e-7\neps_ratio = 0.25\n')
        result = self.invoke('continue', '--config', self.config, '--out', os.path.join(self.dir, 'cont'))
        self.assertEqual(result.exit_code, 0, result.output)
        results = self.read_json('cont', 'summary.json')['results']
        self.assertEqual(results['stages'][-1]['epsilon'], 0.0)
        self.assertEqual({stage['label'] for stage in results['stages']}, {NONCONSTANT})
        self.assertEqual(results['final_max_principle'], 'pass_b')

    def test_spectrum_and_export(self):
        out = os.path.join(self.dir, 'solve')
        self.assertEqual(self.invoke('solve', '--config', self.config, '--out', out).exit_code, 0)
        saved = os.path.join(out, 'map.obj')
        result = self.invoke('spectrum', '--config', self.config, '--init', saved,
                             '--out', os.path.join(self.dir, 'spectrum'))
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(self.read_json('spectrum', 'spectrum.json')['energy']['index'], 1)
        result = self.invoke('export', '--config', self.config, '--init', saved,
                             '--out', os.path.join(self.dir, 'export'))
        self.assertEqual(result.exit_code, 0, result.output)
        for name in ('map.vtk', 'map.obj', 'domain.obj', 'domain.vtk'):
            self.assertTrue(os.path.exists(os.path.join(self.dir, 'export', name)))

    def test_check(self):
        result = self.invoke('check', '--config', self.config, '--init', 'flat', '--H', '1',
                             '--out', os.path.join(self.dir, 'check'))
        self.assertEqual(result.exit_code, 0, result.output)
        checks = self.read_json('check', 'checks.json')
        self.assertEqual(checks['max_principle']['status'], 'pass_b')
        self.assertTrue(checks['hersch']['pass'])
        self.assertTrue(checks['volume_quantization']['pass'])
        self.assertIn('index_comparison', checks)
        summary = self.read_json('check', 'summary.json')
        self.assertEqual(set(summary['results']), set(checks))


if __name__ == '__main__':
    unittest.main(verbosity=2)
