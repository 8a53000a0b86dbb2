import unittest

import numpy as np

from lss.shadowing import dynamics, kkt
from lss.shadowing.dynamics import LorenzParams, lorenz_trajectory
from lss.shadowing.exceptions import GuardViolation, SingularBlockError
from lss.shadowing.kkt import BlockTridiag, KktBlocks
from lss.shadowing.sensitivity import direct_solve, recover_tangent


class TestAssembly(unittest.TestCase):

    def setUp(self):
        self.p = LorenzParams()
        self.traj = lorenz_trajectory(self.p, 0.01, 24, spinup=10.0, seed=1)
        self.blocks = kkt.assemble_blocks(self.traj, self.p, 'r', 40.0)
        self.system = kkt.schur_blocks(self.blocks)

    def test_block_shapes(self):
        self.assertEqual(self.blocks.F.shape, (24, 3, 3))
        self.assertEqual(self.blocks.G.shape, (24, 3, 3))
        self.assertEqual(self.blocks.f.shape, (24, 3))
        self.assertEqual(self.blocks.b.shape, (24, 3))
        self.assertEqual(self.blocks.size, 72)
        self.assertEqual(self.system.rows, 24)

    def test_blocks_discretise_tangent_equation(self):
        u = self.traj.states
        np.testing.assert_allclose(self.blocks.F[0] - self.blocks.G[0],
                                   2 * np.eye(3) / 0.01 + 0.5 * (dynamics.jacobian_u(u[0], self.p)
                                                                 - dynamics.jacobian_u(u[1], self.p)))
        np.testing.assert_allclose(self.blocks.b[0], [0.0, 0.5 * (u[0, 0] + u[1, 0]), 0.0])

    def test_schur_is_symmetric(self):
        scale = np.max(np.abs(self.system.diag))
        self.assertLess(self.system.symmetry_error(), 1e-12 * scale)

    def test_schur_is_positive_definite(self):
        lambda_min, lambda_max = kkt.extreme_eigenvalues(self.system)
        self.assertGreater(lambda_min, 0.0)
        self.assertGreater(lambda_max, lambda_min)

    def test_schur_equals_constraint_products(self):
        B, C = kkt.constraint_matrices(self.blocks)
        expected = (B @ B.T).toarray() + (C @ C.T).toarray() / self.blocks.alpha2
        dense = self.system.to_dense()
        np.testing.assert_allclose(dense, expected, rtol=1e-12, atol=1e-12 * np.max(np.abs(expected)))

    def test_matrix_free_apply_matches_explicit(self):
        w = np.random.default_rng(0).standard_normal(self.blocks.size)
        explicit = self.system.matvec(w)
        scale = np.linalg.norm(explicit)
        self.assertLess(np.linalg.norm(kkt.apply_schur(self.blocks, w) - explicit), 1e-12 * scale)
        self.assertLess(np.linalg.norm(self.system.sparse @ w - explicit), 1e-12 * scale)
        self.assertLess(np.linalg.norm(kkt.schur_operator(self.blocks).matvec(w) - explicit), 1e-12 * scale)

    def test_rhs_vector_is_parameter_derivative(self):
        np.testing.assert_array_equal(kkt.rhs_vector(self.blocks), self.blocks.b.reshape(-1))

    def test_residual_norm_of_direct_solution(self):
        b = kkt.rhs_vector(self.blocks)
        w = direct_solve(self.system, b)
        self.assertLess(kkt.residual_norm(self.blocks, w, b), 1e-9 * np.linalg.norm(b))
        self.assertLess(kkt.residual_norm(self.system, w, b), 1e-9 * np.linalg.norm(b))
        self.assertAlmostEqual(kkt.residual_norm(self.system, np.zeros_like(b), b), np.linalg.norm(b))

    def test_wrong_vector_length_fails(self):
        with self.assertRaises(ValueError):
            kkt.apply_schur(self.blocks, np.ones(5))

    def test_non_positive_alpha_fails(self):
        with self.assertRaises(ValueError):
            kkt.assemble_blocks(self.traj, self.p, 'r', 0.0)
        with self.assertRaises(ValueError):
            KktBlocks(F=self.blocks.F, G=self.blocks.G, f=self.blocks.f, b=self.blocks.b, alpha2=-1.0, dt=0.01)


class TestFullSystem(unittest.TestCase):

    def setUp(self):
        self.p = LorenzParams()
        traj = lorenz_trajectory(self.p, 0.01, 20, spinup=10.0, seed=2)
        self.blocks = kkt.assemble_blocks(traj, self.p, 'b', 10.0)

    def test_full_solve_matches_schur_route(self):
        v, eta, w = kkt.solve_kkt_full(self.blocks)
        w_schur = direct_solve(kkt.schur_blocks(self.blocks), kkt.rhs_vector(self.blocks))
        np.testing.assert_allclose(w, w_schur, rtol=1e-7, atol=1e-8 * np.max(np.abs(w_schur)))
        tangent = recover_tangent(self.blocks, w_schur)
        np.testing.assert_allclose(tangent.v, v, rtol=1e-6, atol=1e-7 * np.max(np.abs(v)))
        np.testing.assert_allclose(tangent.eta, eta, rtol=1e-6, atol=1e-7 * np.max(np.abs(eta)))

    def test_optimality_conditions(self):
        v, eta, w = kkt.solve_kkt_full(self.blocks)
        B, C = kkt.constraint_matrices(self.blocks)
        scale = np.max(np.abs(v))
        np.testing.assert_allclose(v.reshape(-1), -(B.T @ w), atol=1e-7 * scale)
        np.testing.assert_allclose(self.blocks.alpha2 * eta, -(C.T @ w), atol=1e-7 * scale)
        constraint = kkt.apply_constraint(self.blocks, v, eta) + self.blocks.b
        self.assertLess(np.max(np.abs(constraint)), 1e-8 * np.max(np.abs(self.blocks.b)))

    def test_kkt_matrix_is_symmetric(self):
        matrix = kkt.kkt_matrix(self.blocks)
        self.assertEqual(matrix.shape, (21 * 3 + 20 + 20 * 3,) * 2)
        self.assertEqual(abs(matrix - matrix.T).max(), 0.0)


class TestBlockTridiag(unittest.TestCase):

    def test_dense_round_trip(self):
        rng = np.random.default_rng(3)
        upper = rng.standard_normal((3, 2, 2))
        system = BlockTridiag(lower=upper.transpose(0, 2, 1).copy(), diag=rng.standard_normal((4, 2, 2)),
                              upper=upper)
        rebuilt = BlockTridiag.from_dense(system.to_dense(), 2)
        np.testing.assert_array_equal(rebuilt.diag, system.diag)
        np.testing.assert_array_equal(rebuilt.lower, system.lower)
        np.testing.assert_array_equal(rebuilt.upper, system.upper)

    def test_identity(self):
        system = BlockTridiag.identity(5, 3)
        x = np.arange(15.0)
        np.testing.assert_array_equal(system.matvec(x), x)
        np.testing.assert_allclose(kkt.extreme_eigenvalues(system), (1.0, 1.0))

    def test_dense_guard(self):
        with self.assertRaises(GuardViolation):
            BlockTridiag.identity(10, 3).to_dense(max_rows=4)

    def test_inconsistent_shapes_fail(self):
        with self.assertRaises(ValueError):
            BlockTridiag(lower=np.zeros((2, 3, 3)), diag=np.zeros((2, 3, 3)), upper=np.zeros((1, 3, 3)))

    def test_singular_block_is_named(self):
        blocks = np.stack([np.eye(3), np.zeros((3, 3)), np.eye(3)])
        with self.assertRaises(SingularBlockError) as context:
            kkt.invert_blocks(blocks, level=2)
        self.assertEqual(context.exception.block, 1)
        self.assertEqual(context.exception.level, 2)


class TestRandomizedInstances(unittest.TestCase):

    def test_symmetric_positive_definite(self):
        p = LorenzParams()
        rng = np.random.default_rng(11)
        for seed in range(100):
            traj = lorenz_trajectory(p, float(rng.uniform(0.002, 0.05)), 8, spinup=1.0, seed=seed)
            alpha2 = float(10.0 ** rng.uniform(-1, 3))
            system = kkt.schur_blocks(kkt.assemble_blocks(traj, p, 'srb'[seed % 3], alpha2))
            self.assertLess(system.symmetry_error(), 1e-12 * np.max(np.abs(system.diag)))
            lambda_min, _ = kkt.extreme_eigenvalues(system)
            self.assertGreater(lambda_min, 0.0)


if __name__ == "__main__":
    unittest.main()
