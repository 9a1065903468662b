# chenflow/tests/test_flow_engine.py
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from chenflow.analysis_suite import (
    Constants,
    area_decay_check,
    blowup_report,
    fit_lifespan_constant,
    predicted_lifespan,
    records_frame,
    sphere_radius_at,
    tracefree_monotonicity_check,
)
from chenflow.diffgeo_ops import build_operators, curvature_field
from chenflow.exceptions import FlowTerminated, InvalidParameters
from chenflow.flow_engine import (
    FlowConfig,
    FlowFamily,
    Integrator,
    Termination,
    _mesh_ratio,
    _termination_of,
    choose_tau,
    initial_state,
    run_flow,
    step_cf,
    step_ncf,
    velocity,
)
from chenflow.mesh_core import dumbbell, ellipsoid, icosphere

EXTINCTION_TIME = 1.0 / 16.0


def radii(mesh, mass):
    """Distancias al centroide ponderado por masa"""
    center = mass @ mesh.positions / mass.sum()
    return np.linalg.norm(mesh.positions - center, axis=1)


def mean_radius(state):
    mass = state.ops.mass
    return float(radii(state.mesh, mass) @ mass / mass.sum())


def mean_vertex_radius(state):
    """Distancia media de los vértices a su centroide sin pesos"""
    positions = state.mesh.positions
    return float(np.linalg.norm(positions - positions.mean(axis=0), axis=1).mean())


def rotation(angle_a, angle_b):
    ca, sa = np.cos(angle_a), np.sin(angle_a)
    cb, sb = np.cos(angle_b), np.sin(angle_b)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, cb, -sb], [0, sb, cb]])
    return rz @ rx


class FlowConfigTests(SimpleTestCase):

    def test_defaults(self):
        config = FlowConfig()
        self.assertEqual(config.family, FlowFamily.CHEN)
        self.assertEqual(config.integrator, Integrator.CF_SEMIIMPLICIT)
        self.assertGreaterEqual(config.solver_maxiter, 1)

    def test_strings_are_normalized(self):
        config = FlowConfig(family='willmore', integrator='ncf_explicit')
        self.assertIs(config.family, FlowFamily.WILLMORE)
        self.assertEqual(config.as_dict()['integrator'], 'ncf_explicit')

    def test_invalid_values(self):
        cases = [
            {'family': 'mean_curvature'},
            {'tau_scale': 0.0},
            {'tau_max': -1.0},
            {'stop_area_fraction': 1.0},
            {'rebuild_every': 0},
            {'max_steps': -1},
            {'stop_h_ratio': 0.0},
            {'stop_h_ratio': 1.0},
            {'family': 'willmore'},   # cf solo con chen
        ]
        for kwargs in cases:
            with self.subTest(**kwargs), self.assertRaises(InvalidParameters):
                FlowConfig(**kwargs)


class VelocityTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sphere = icosphere(1.0, 4)
        cls.ops = build_operators(cls.sphere)
        cls.field = curvature_field(cls.sphere, cls.ops)
        cls.nu = cls.sphere.positions.copy()

    def normal_speed(self, F, ops, nu):
        return float(np.einsum('vn,vn->v', F, nu) @ ops.mass / ops.mass.sum())

    def test_unit_sphere_moves_inward_with_speed_four(self):
        F = velocity(self.field, self.ops, FlowFamily.CHEN)
        self.assertAlmostEqual(self.normal_speed(F, self.ops, self.nu), 4.0, delta=0.4)

    def test_speed_scales_with_inverse_cube_of_radius(self):
        mesh = icosphere(2.0, 4)
        ops = build_operators(mesh)
        F = velocity(curvature_field(mesh, ops), ops, 'chen')
        self.assertAlmostEqual(self.normal_speed(F, ops, mesh.positions / 2.0), 0.5, delta=0.05)

    def test_corrections_vanish_with_zero_field(self):
        zero = replace(
            self.field,
            H=np.zeros_like(self.field.H),
            H_lap=np.zeros_like(self.field.H_lap),
            second_form=np.zeros_like(self.field.second_form),
            tracefree=np.zeros_like(self.field.tracefree),
        )
        for family in FlowFamily:
            with self.subTest(family=family):
                np.testing.assert_array_equal(velocity(zero, self.ops, family), 0.0)

    def test_velocity_is_normal(self):
        F = velocity(self.field, self.ops, FlowFamily.WILLMORE)
        tangent = self.field.fitted_frames.tangent
        np.testing.assert_allclose(np.einsum('vn,vna->va', F, tangent), 0.0, atol=1e-9)


class StepTests(SimpleTestCase):

    def setUp(self):
        self.config = FlowConfig()
        self.ncf_config = FlowConfig(integrator=Integrator.NCF_EXPLICIT)
        self.state = initial_state(icosphere(1.0, 3))

    def test_zero_tau_returns_same_state(self):
        self.assertIs(step_cf(self.state, 0.0, self.config), self.state)
        self.assertIs(step_ncf(self.state, 0.0, self.ncf_config), self.state)

    def test_negative_tau(self):
        with self.assertRaises(InvalidParameters):
            step_cf(self.state, -1e-4, self.config)

    def test_terminated_state_cannot_step(self):
        done = replace(self.state, termination=Termination.STEP_BUDGET)
        with self.assertRaises(FlowTerminated):
            step_cf(done, 1e-4, self.config)

    def test_cf_requires_chen(self):
        config = FlowConfig(family=FlowFamily.WILLMORE, integrator=Integrator.NCF_EXPLICIT)
        with self.assertRaises(InvalidParameters):
            step_cf(self.state, 1e-4, config)

    def test_ncf_radius_decrease(self):
        state = initial_state(icosphere(1.0, 4))
        tau = 1e-5
        after = step_ncf(state, tau, self.ncf_config)
        self.assertEqual(after.step, 1)
        self.assertAlmostEqual(after.t, tau)
        mass = state.ops.mass
        drop = (np.linalg.norm(state.mesh.positions, axis=1)
                - np.linalg.norm(after.mesh.positions, axis=1)) @ mass / mass.sum()
        self.assertAlmostEqual(drop / (4.0 * tau), 1.0, delta=0.15)

    def test_cf_keeps_sphere_round_and_follows_radius_law(self):
        tau = 1e-4
        after = step_cf(self.state, tau, self.config)
        r = radii(after.mesh, after.ops.mass)
        self.assertLess(r.std() / r.mean(), 1e-2)
        expected = sphere_radius_at(mean_radius(self.state), 2, tau)
        self.assertAlmostEqual(mean_radius(after), expected, delta=1e-3)

    def test_cf_preserves_weighted_centroid(self):
        after = step_cf(self.state, 1e-4, self.config)
        mass = self.state.ops.mass
        np.testing.assert_allclose(mass @ after.mesh.positions, mass @ self.state.mesh.positions, atol=1e-8)

    def test_cf_translation_invariance(self):
        shift = np.array([5.0, -3.0, 2.0])
        moved = initial_state(self.state.mesh.with_positions(self.state.mesh.positions + shift))
        a = step_cf(self.state, 1e-4, self.config)
        b = step_cf(moved, 1e-4, self.config)
        np.testing.assert_allclose(b.mesh.positions - shift, a.mesh.positions, atol=1e-6)

    def test_cf_rotation_equivariance(self):
        Q = rotation(0.7, -1.1)
        rotated = initial_state(self.state.mesh.with_positions(self.state.mesh.positions @ Q.T))
        a, b = self.state, rotated
        for _ in range(3):
            a = step_cf(a, 1e-4, self.config)
            b = step_cf(b, 1e-4, self.config)
        np.testing.assert_allclose(b.mesh.positions, a.mesh.positions @ Q.T, atol=1e-6)


class ChooseTauTests(SimpleTestCase):

    def test_cf_scales_with_fourth_power_of_edge(self):
        config = FlowConfig(tau_scale=0.5, tau_max=1.0)
        big = initial_state(icosphere(1.0, 2))
        small = initial_state(icosphere(0.5, 2))
        self.assertAlmostEqual(choose_tau(big, config), 0.5 * big.mesh.h_min ** 4)
        self.assertAlmostEqual(choose_tau(small, config) / choose_tau(big, config), 1.0 / 16.0)

    def test_ncf_is_damped_by_curvature(self):
        state = initial_state(icosphere(1.0, 2))
        config = FlowConfig(integrator=Integrator.NCF_EXPLICIT, tau_scale=0.02, tau_max=1.0)
        h = state.mesh.h_min
        expected = 0.02 * h ** 4 / (1.0 + (h * state.field.max_abs_A) ** 4)
        self.assertAlmostEqual(choose_tau(state, config), expected)

    def test_capped_by_tau_max(self):
        state = initial_state(icosphere(1.0, 0))
        self.assertEqual(choose_tau(state, FlowConfig(tau_scale=1e3, tau_max=1e-3)), 1e-3)


class RunFlowTests(SimpleTestCase):

    def test_zero_step_budget(self):
        trajectory = run_flow(icosphere(1.0, 2), FlowConfig(max_steps=0, track_concentration=False),
                              keep_snapshots=True)
        self.assertEqual(trajectory.termination, Termination.STEP_BUDGET)
        self.assertEqual(len(trajectory.snapshots), 1)
        self.assertEqual(len(trajectory.records), 1)
        self.assertEqual(trajectory.final_state.termination, Termination.STEP_BUDGET)
        self.assertEqual(trajectory.snapshots[0].termination, Termination.STEP_BUDGET)

    def test_snapshots_are_not_kept_by_default(self):
        config = FlowConfig(max_steps=4, diag_every=2, tau_scale=1.0, track_concentration=False)
        trajectory = run_flow(icosphere(1.0, 2), config)
        self.assertEqual(trajectory.snapshots, [])
        self.assertEqual(len(trajectory.records), 3)

    def test_solver_failure_is_reported(self):
        config = FlowConfig(solver_maxiter=1, track_concentration=False)
        trajectory = run_flow(icosphere(1.0, 2), config)
        self.assertEqual(trajectory.termination, Termination.SOLVER_FAILURE)
        self.assertIn('CG', trajectory.message)
        self.assertEqual(trajectory.final_state.step, 0)

    def test_singularity_threshold(self):
        config = FlowConfig(stop_max_A_h=1e-3, track_concentration=False)
        trajectory = run_flow(icosphere(1.0, 2), config)
        self.assertEqual(trajectory.termination, Termination.SINGULARITY)

    def test_edge_collapse_is_a_singularity(self):
        config = FlowConfig(track_concentration=False)
        state = initial_state(icosphere(1.0, 2))
        area = state.mesh.area
        ratio = _mesh_ratio(state.mesh)
        self.assertEqual(_termination_of(state, config, area, ratio), (None, ''))
        termination, message = _termination_of(state, config, area, 20.0 * ratio)
        self.assertEqual(termination, Termination.SINGULARITY)
        self.assertIn('colapso', message)
        # el umbral de |A| h tiene prioridad y no deja mensaje
        strict = FlowConfig(stop_max_A_h=1e-6, track_concentration=False)
        self.assertEqual(_termination_of(state, strict, area, 20.0 * ratio), (Termination.SINGULARITY, ''))

    def test_snapshot_callback_sees_every_record(self):
        seen = []
        config = FlowConfig(max_steps=6, diag_every=2, tau_scale=1.0, track_concentration=False)
        trajectory = run_flow(icosphere(1.0, 2), config, on_snapshot=lambda s, r: seen.append((s.step, r.t)))
        self.assertEqual([step for step, _ in seen], [0, 2, 4, 6])
        self.assertEqual([t for _, t in seen], [r.t for r in trajectory.records])

    def test_final_state_is_recorded_once(self):
        seen = []
        config = FlowConfig(max_steps=5, diag_every=2, tau_scale=1.0, track_concentration=False)
        trajectory = run_flow(icosphere(1.0, 2), config, on_snapshot=lambda s, r: seen.append(s))
        self.assertEqual([s.step for s in seen], [0, 2, 4, 5])
        self.assertEqual(seen[-1].termination, Termination.STEP_BUDGET)
        self.assertIsNone(seen[0].termination)

    def test_threads_do_not_change_results(self):
        config = FlowConfig(max_steps=4, diag_every=2, tau_scale=1.0)
        one = run_flow(icosphere(1.0, 2), config, threads=1)
        two = run_flow(icosphere(1.0, 2), config, threads=2)
        np.testing.assert_array_equal(one.final_state.mesh.positions, two.final_state.mesh.positions)
        self.assertTrue(records_frame(one.records).equals(records_frame(two.records)))


class NormalFlowTests(SimpleTestCase):

    def test_ncf_keeps_centroid_of_symmetric_surface(self):
        config = FlowConfig(integrator=Integrator.NCF_EXPLICIT, tau_scale=0.02)
        state = initial_state(ellipsoid(1.0, 1.0, 1.2, 3))
        for _ in range(10):
            state = step_ncf(state, choose_tau(state, config), config)
        self.assertEqual(state.step, 10)
        mass = state.ops.mass
        np.testing.assert_allclose(state.mesh.positions.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(mass @ state.mesh.positions / mass.sum(), 0.0, atol=1e-12)

    def test_willmore_and_surface_diffusion_runs(self):
        mesh = ellipsoid(1.0, 1.0, 1.2, 2)
        for family in (FlowFamily.WILLMORE, FlowFamily.SURFACE_DIFFUSION):
            with self.subTest(family=family):
                config = FlowConfig(family=family, integrator=Integrator.NCF_EXPLICIT, tau_scale=0.02,
                                    max_steps=20, diag_every=5, track_concentration=False)
                trajectory = run_flow(mesh, config)
                self.assertEqual(trajectory.termination, Termination.STEP_BUDGET)
                self.assertEqual(trajectory.final_state.step, 20)
                frame = records_frame(trajectory.records)
                self.assertEqual(len(frame), 5)
                self.assertTrue(np.isfinite(frame[['area', 'energy_H2', 'energy_Ao2']].to_numpy()).all())
                self.assertGreater(np.abs(trajectory.final_state.mesh.positions - mesh.positions).max(), 0.0)
                if family == FlowFamily.SURFACE_DIFFUSION:
                    self.assertLessEqual(frame['area'].iloc[-1], frame['area'].iloc[0])


class DumbbellTests(SimpleTestCase):

    def test_neck_pinch_is_a_singularity(self):
        config = FlowConfig(tau_scale=1.0, max_steps=50000, diag_every=50, track_concentration=False)
        trajectory = run_flow(dumbbell(0.1, 2), config)
        self.assertEqual(trajectory.termination, Termination.SINGULARITY)
        frame = records_frame(trajectory.records)
        self.assertGreater(frame['area'].iloc[-1], config.stop_area_fraction * frame['area'].iloc[0])


class SphereExtinctionTests(SimpleTestCase):
    """Una corrida completa de la esfera unitaria compartida por los chequeos"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.constants = Constants()
        cls.config = FlowConfig(tau_scale=1.0, diag_every=50)
        cls.trajectory = run_flow(icosphere(1.0, 3), cls.config, cls.constants, keep_snapshots=True)
        cls.frame = records_frame(cls.trajectory.records)

    def test_goes_extinct_near_predicted_time(self):
        self.assertEqual(self.trajectory.termination, Termination.EXTINCT)
        self.assertAlmostEqual(self.trajectory.final_time / EXTINCTION_TIME, 1.0, delta=0.03)

    def test_radius_law(self):
        checked = 0
        for snapshot in self.trajectory.snapshots:
            if snapshot.t > 0.9 * EXTINCTION_TIME:
                continue
            expected = (1.0 - 16.0 * snapshot.t) ** 0.25
            self.assertAlmostEqual(mean_vertex_radius(snapshot), expected, delta=0.01)
            checked += 1
        self.assertGreaterEqual(checked, 5)

    def test_area_decay_is_sharp(self):
        report = area_decay_check(self.trajectory.records, self.constants)
        self.assertTrue(report.passed)
        mu0_sq = self.frame['area_sq'].iloc[0]
        predicted = mu0_sq - 256.0 * np.pi ** 2 * self.frame['t']
        self.assertLessEqual((self.frame['area_sq'] - predicted).abs().max(), 0.02 * mu0_sq)
        self.assertTrue((self.frame['area'].diff().dropna() < 0).all())

    def test_tracefree_energy_does_not_grow(self):
        self.assertTrue(tracefree_monotonicity_check(self.frame, self.constants.eps2).passed)

    def test_lifespan_constant(self):
        c = fit_lifespan_constant(self.trajectory.records, self.trajectory.final_time)
        self.assertTrue(np.isfinite(c) and c > 0)
        rho0 = self.frame['rho_star'].iloc[0]
        self.assertLessEqual(predicted_lifespan(rho0, c), self.trajectory.final_time * (1 + 1e-12))

    def test_blowup_limits_are_round_spheres(self):
        report = blowup_report(self.trajectory, eps3=self.constants.eps1)
        self.assertGreaterEqual(len(report), 1)
        for item in report:
            self.assertLessEqual(item.sphere_rms, 1e-2)
            self.assertLessEqual(item.tracefree_energy, 0.1)
            self.assertGreaterEqual(item.rescaled_area, np.pi)
            self.assertLessEqual(item.rescaled_area, 64 * np.pi)
        times = [item.t for item in report]
        self.assertEqual(times, sorted(times))


class EllipsoidFlowTests(SimpleTestCase):

    def test_area_decay_and_tracefree_decrease(self):
        constants = Constants()
        config = FlowConfig(tau_scale=5.0, max_steps=300, diag_every=10, track_concentration=False)
        trajectory = run_flow(ellipsoid(1.0, 1.0, 1.2, 3), config, constants)
        frame = records_frame(trajectory.records)
        self.assertTrue(area_decay_check(frame, constants).passed)
        self.assertTrue(tracefree_monotonicity_check(frame, constants.eps2).passed)
        self.assertLess(frame['energy_Ao2'].iloc[-1], frame['energy_Ao2'].iloc[0])


class EllipsoidExtinctionTests(SimpleTestCase):
    """Elipsoide casi redondo hasta el corte por área: el límite es una esfera"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.constants = Constants()
        cls.config = FlowConfig(tau_scale=5.0, diag_every=100)
        cls.trajectory = run_flow(ellipsoid(1.0, 1.0, 1.2, 4), cls.config, cls.constants,
                                  keep_snapshots=True)

    def test_reaches_area_stop(self):
        self.assertEqual(self.trajectory.termination, Termination.EXTINCT)
        frame = records_frame(self.trajectory.records)
        self.assertLess(frame['area'].iloc[-1], self.config.stop_area_fraction * frame['area'].iloc[0])
        self.assertTrue(tracefree_monotonicity_check(frame, self.constants.eps2).passed)

    def test_blowup_limit_is_round(self):
        report = blowup_report(self.trajectory, eps3=self.constants.eps1)
        self.assertGreaterEqual(len(report), 1)
        self.assertLessEqual(report[-1].sphere_rms, 1e-2)


class IntegratorAgreementTests(SimpleTestCase):

    def test_explicit_and_semi_implicit_agree_on_sphere(self):
        tau, steps = 4e-5, 400
        cf_config = FlowConfig()
        ncf_config = FlowConfig(integrator=Integrator.NCF_EXPLICIT)
        cf = ncf = initial_state(icosphere(1.0, 2))
        r0 = mean_radius(cf)
        for _ in range(steps):
            cf = step_cf(cf, tau, cf_config)
            ncf = step_ncf(ncf, tau, ncf_config)
        expected = sphere_radius_at(r0, 2, steps * tau)
        self.assertAlmostEqual(mean_radius(cf) / expected, 1.0, delta=0.02)
        self.assertAlmostEqual(mean_radius(ncf) / expected, 1.0, delta=0.02)
        self.assertAlmostEqual(mean_radius(ncf) / mean_radius(cf), 1.0, delta=0.02)
