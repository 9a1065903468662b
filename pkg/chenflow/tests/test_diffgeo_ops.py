# chenflow/tests/test_diffgeo_ops.py
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from chenflow.diffgeo_ops import (
    build_operators,
    covariant_gradients,
    curvature_field,
    dump_field,
    face_gradients,
    gauss_curvature_angle_defect,
    q_endomorphism,
    vertex_frames,
)
from chenflow.exceptions import DegenerateCotangent
from chenflow.mesh_core import ImmersedMesh, ellipsoid, icosphere, torus


def outward_normals(mesh):
    return mesh.positions / np.linalg.norm(mesh.positions, axis=1)[:, None]


class OperatorTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.mesh = icosphere(1.0, 3)
        cls.ops = build_operators(cls.mesh)

    def test_stiffness_is_symmetric_with_zero_row_sums(self):
        L = self.ops.stiffness
        self.assertAlmostEqual(abs(L - L.T).max(), 0.0, places=14)
        np.testing.assert_allclose(np.asarray(L.sum(axis=1)).ravel(), 0.0, atol=1e-12)

    def test_mass_sums_to_area(self):
        self.assertAlmostEqual(self.ops.total_area, self.mesh.area, places=12)
        self.assertTrue(np.all(self.ops.mass > 0))

    def test_laplacian_of_position_on_unit_sphere(self):
        errors = []
        for level in (2, 3, 4):
            mesh = icosphere(1.0, level)
            H_lap = build_operators(mesh).laplacian(mesh.positions)
            errors.append(np.linalg.norm(H_lap + 2.0 * outward_normals(mesh), axis=1).max())
        self.assertLess(errors[1], errors[0])
        self.assertLess(errors[2], errors[1])
        self.assertLessEqual(errors[2], 0.05)

    def test_mixed_voronoi_mass(self):
        h = np.sqrt(3.0) / 2.0
        equilateral = ImmersedMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0.5, h, 0]], [[0, 1, 2]])
        np.testing.assert_allclose(build_operators(equilateral).mass, h / 6.0, rtol=1e-12)

        obtuse = ImmersedMesh.from_arrays([[0, 0, 0], [4, 0, 0], [2, 0.5, 0]], [[0, 1, 2]])
        area = obtuse.area
        np.testing.assert_allclose(build_operators(obtuse).mass, [area / 4, area / 4, area / 2], rtol=1e-12)

        right = ImmersedMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        np.testing.assert_allclose(build_operators(right).mass, [0.25, 0.125, 0.125], rtol=1e-12)

    def test_bilaplacian_stiffness_is_positive_semidefinite(self):
        B = self.ops.bilaplacian_stiffness
        rng = np.random.default_rng(7)
        for _ in range(5):
            x = rng.standard_normal(self.mesh.num_vertices)
            self.assertGreaterEqual(x @ (B @ x), -1e-10)

    def test_near_straight_angle(self):
        mesh = ImmersedMesh.from_arrays([[0, 0, 0], [1, 0, 0], [2, 1e-9, 0]], [[0, 1, 2]])
        with self.assertRaises(DegenerateCotangent):
            build_operators(mesh, strict=True)
        with self.assertLogs('chenflow.diffgeo_ops', level='WARNING'):
            ops = build_operators(mesh)
        self.assertEqual(ops.degenerate_angles, 1)
        self.assertLessEqual(abs(ops.stiffness).max(), 1e6)


class CurvatureFieldTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.sphere = icosphere(1.0, 4)
        cls.sphere_ops = build_operators(cls.sphere)
        cls.sphere_field = curvature_field(cls.sphere, cls.sphere_ops)
        cls.ellipsoid = ellipsoid(1.0, 1.0, 1.2, 3)
        cls.ellipsoid_field = curvature_field(cls.ellipsoid)

    def test_frames_are_orthonormal(self):
        frames = vertex_frames(self.sphere)
        basis = np.concatenate((frames.tangent, frames.normal), axis=2)
        gram = np.einsum('vna,vnb->vab', basis, basis)
        np.testing.assert_allclose(gram, np.broadcast_to(np.eye(3), gram.shape), atol=1e-12)

    def test_unit_sphere_mean_curvature(self):
        nu = outward_normals(self.sphere)
        self.assertLess(np.linalg.norm(self.sphere_field.H + 2.0 * nu, axis=1).max(), 0.02)
        np.testing.assert_allclose(self.sphere_field.K, 1.0, atol=0.02)
        self.assertLess(self.sphere_field.Ao_sq.max(), 1e-3)

    def test_algebraic_identities(self):
        for field in (self.sphere_field, self.ellipsoid_field):
            np.testing.assert_allclose(field.tracefree_trace, 0.0, atol=1e-10)
            np.testing.assert_allclose(field.A_sq, field.Ao_sq + 0.5 * field.H_sq, atol=1e-10)
            np.testing.assert_allclose(field.K, 0.5 * (field.H_sq - field.A_sq), atol=1e-10)

    def test_q_endomorphism_lower_bound(self):
        for field in (self.sphere_field, self.ellipsoid_field):
            QH = q_endomorphism(field, field.H)
            inner = np.einsum('vn,vn->v', QH, field.H)
            self.assertTrue(np.all(inner >= 0.5 * field.H_sq ** 2 - 1e-12 * (1 + field.H_sq ** 2)))

    def test_q_endomorphism_on_unit_sphere(self):
        QH = q_endomorphism(self.sphere_field, self.sphere_field.H)
        nu = outward_normals(self.sphere)
        self.assertLess(np.linalg.norm(QH + 4.0 * nu, axis=1).max(), 0.1)

    def test_q_endomorphism_projects_tangent_input(self):
        phi = self.sphere_field.fitted_frames.tangent[:, :, 0]
        with self.assertLogs('chenflow.diffgeo_ops', level='WARNING'):
            result = q_endomorphism(self.sphere_field, phi)
        np.testing.assert_allclose(result, 0.0, atol=1e-12)

    def test_gauss_bonnet_angle_defect(self):
        for mesh, chi in ((self.sphere, 2), (torus(2.0, 1.0, 64, 32), 0)):
            ops = build_operators(mesh)
            total = gauss_curvature_angle_defect(mesh, ops) @ ops.mass
            self.assertAlmostEqual(total, 2 * np.pi * chi, delta=1e-8 * max(2 * np.pi * abs(chi), 1.0))

    def test_codimension_two_sphere(self):
        mesh = icosphere(1.0, 3, ambient_dim=4)
        field = curvature_field(mesh)
        self.assertEqual(field.fitted_frames.normal.shape, (mesh.num_vertices, 4, 2))
        np.testing.assert_allclose(field.H_sq, 4.0, rtol=0.03)
        np.testing.assert_allclose(field.H[:, 3], 0.0, atol=1e-10)

    def test_clifford_torus_is_flat_and_minimal_in_s3(self):
        mesh = torus(1.0, 0.0, 64, 64, embed='clifford_R4')
        field = curvature_field(mesh)
        np.testing.assert_allclose(field.H_sq, 4.0, rtol=0.02)
        np.testing.assert_allclose(field.K, 0.0, atol=0.05)

    def test_mean_curvature_discrepancy_reported(self):
        self.assertLess(self.sphere_field.mean_curvature_discrepancy(), 0.05)
        self.assertTrue(np.isnan(replace(self.sphere_field, H_lap=None).mean_curvature_discrepancy()))


class GradientTests(SimpleTestCase):

    def test_linear_function_on_flat_patch(self):
        positions = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
        mesh = ImmersedMesh.from_arrays(positions, [[0, 1, 2], [0, 2, 3]])
        u = 2.0 * positions[:, 0] + 3.0 * positions[:, 1]
        grads = face_gradients(mesh, u)
        np.testing.assert_allclose(np.linalg.norm(grads, axis=1), np.sqrt(13.0), rtol=1e-12)

    def test_round_sphere_has_small_tracefree_gradient(self):
        sphere = icosphere(1.0, 3)
        oval = ellipsoid(1.0, 1.0, 1.3, 3)
        grad_sphere = covariant_gradients(sphere, curvature_field(sphere))
        grad_oval = covariant_gradients(oval, curvature_field(oval))
        self.assertLess(grad_sphere.int_grad_Ao2, 0.1 * grad_oval.int_grad_Ao2)
        self.assertLess(grad_sphere.int_grad_H2, 0.1 * grad_oval.int_grad_H2)


class DumpFieldTests(SimpleTestCase):

    def test_long_csv_and_npz(self):
        mesh = icosphere(1.0, 1)
        ops = build_operators(mesh)
        field = curvature_field(mesh, ops)
        with tempfile.TemporaryDirectory() as tmp:
            frame = pd.read_csv(dump_field(field, ops, Path(tmp) / 'campo.csv'))
            self.assertEqual(list(frame.columns), ['vertex', 'quantity', 'value'])
            self.assertEqual(len(frame), 6 * mesh.num_vertices)
            self.assertEqual(
                set(frame['quantity']), {'mass', 'H_sq', 'A_sq', 'Ao_sq', 'K', 'H_lap_sq'}
            )
            with np.load(dump_field(field, ops, Path(tmp) / 'campo.npz')) as data:
                np.testing.assert_array_equal(data['mass'], ops.mass)
