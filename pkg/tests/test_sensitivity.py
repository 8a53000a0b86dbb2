import unittest

import numpy as np

from lss.shadowing import kkt, sensitivity
from lss.shadowing.dynamics import LorenzParams, Trajectory, lorenz_trajectory
from lss.shadowing.exceptions import GuardViolation, SingularBlockError
from lss.shadowing.kkt import BlockTridiag
from lss.shadowing.sensitivity import TangentSolution


class TestQuantities(unittest.TestCase):

    def test_components(self):
        u = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        np.testing.assert_array_equal(sensitivity.quantity_of_interest('x').evaluate(u), [1.0, 4.0])
        np.testing.assert_array_equal(sensitivity.quantity_of_interest('z').gradient_u(u), [[0, 0, 1], [0, 0, 1]])

    def test_squared_component(self):
        qoi = sensitivity.quantity_of_interest('z2')
        u = np.array([1.0, 2.0, 3.0])
        self.assertEqual(qoi.evaluate(u), 9.0)
        np.testing.assert_array_equal(qoi.gradient_u(u), [0.0, 0.0, 6.0])

    def test_unknown_quantity_fails(self):
        with self.assertRaises(ValueError):
            sensitivity.quantity_of_interest('energy')


class TestGradient(unittest.TestCase):

    def setUp(self):
        self.traj = Trajectory(states=np.tile([1.0, 2.0, 3.0], (11, 1)), dt=0.1)
        self.qoi = sensitivity.quantity_of_interest('z')

    def test_time_average_of_constant(self):
        self.assertAlmostEqual(sensitivity.time_average(self.traj, self.qoi), 3.0)

    def test_time_average_uses_trapezoid_rule(self):
        t = np.linspace(0.0, 1.0, 11)
        traj = Trajectory(states=np.stack([t, t, t ** 2], axis=1), dt=0.1)
        self.assertAlmostEqual(sensitivity.time_average(traj, self.qoi), 0.335)

    def test_zero_tangent_gives_zero_gradient(self):
        tangent = TangentSolution(v=np.zeros((11, 3)), eta=np.zeros(10))
        self.assertEqual(sensitivity.gradient(self.traj, tangent, self.qoi), 0.0)

    def test_uniform_shift(self):
        tangent = TangentSolution(v=np.tile([0.0, 0.0, 1.0], (11, 1)), eta=np.zeros(10))
        self.assertAlmostEqual(sensitivity.gradient(self.traj, tangent, self.qoi), 1.0)

    def test_constant_dilation_has_no_effect(self):
        states = np.stack([np.zeros(11), np.zeros(11), np.linspace(0.0, 1.0, 11)], axis=1)
        traj = Trajectory(states=states, dt=0.1)
        tangent = TangentSolution(v=np.zeros((11, 3)), eta=np.full(10, 0.7))
        self.assertAlmostEqual(sensitivity.gradient(traj, tangent, self.qoi), 0.0)

    def test_dilation_covariance(self):
        states = np.stack([np.zeros(3), np.zeros(3), np.array([0.0, 1.0, 2.0])], axis=1)
        traj = Trajectory(states=states, dt=0.1)
        tangent = TangentSolution(v=np.zeros((3, 3)), eta=np.array([1.0, -1.0]))
        # midpoint values 0.5 and 1.5: mean(eta J) - mean(eta) mean(J) = -0.5
        self.assertAlmostEqual(sensitivity.gradient(traj, tangent, self.qoi), -0.5)

    def test_mismatched_tangent_fails(self):
        tangent = TangentSolution(v=np.zeros((5, 3)), eta=np.zeros(4))
        with self.assertRaises(ValueError):
            sensitivity.gradient(self.traj, tangent, self.qoi)

    def test_inconsistent_tangent_fails(self):
        with self.assertRaises(ValueError):
            TangentSolution(v=np.zeros((5, 3)), eta=np.zeros(5))


class TestTangentRecovery(unittest.TestCase):

    def setUp(self):
        self.p = LorenzParams()
        self.traj = lorenz_trajectory(self.p, 0.01, 30, spinup=5.0, seed=9)
        self.blocks = kkt.assemble_blocks(self.traj, self.p, 's', 40.0)
        self.system = kkt.schur_blocks(self.blocks)
        self.w = sensitivity.direct_solve(self.system, kkt.rhs_vector(self.blocks))

    def test_tangent_satisfies_constraints(self):
        tangent = sensitivity.recover_tangent(self.blocks, self.w)
        residual = sensitivity.constraint_residual(self.blocks, tangent)
        self.assertLess(np.max(np.abs(residual)), 1e-8 * max(np.max(np.abs(self.blocks.b)), 1.0))
        self.assertEqual(tangent.v.shape, (31, 3))
        self.assertEqual(tangent.eta.shape, (30,))

    def test_tangent_matches_full_system(self):
        v, eta, _ = kkt.solve_kkt_full(self.blocks)
        tangent = sensitivity.recover_tangent(self.blocks, self.w)
        np.testing.assert_allclose(tangent.v, v, rtol=1e-6, atol=1e-7 * np.max(np.abs(v)))
        np.testing.assert_allclose(tangent.eta, eta, rtol=1e-6, atol=1e-7 * np.max(np.abs(eta)))

    def test_solution_minimises_objective(self):
        tangent = sensitivity.recover_tangent(self.blocks, self.w)
        best = sensitivity.objective(tangent, self.blocks.alpha2, self.blocks.dt)
        # a homogeneous solution of the constraints keeps feasibility and must not lower the objective
        homogeneous = np.zeros((31, 3))
        homogeneous[0] = [1.0, 0.0, 0.0]
        for i in range(30):
            homogeneous[i + 1] = np.linalg.solve(self.blocks.G[i], -self.blocks.F[i] @ homogeneous[i])
        B, _ = kkt.constraint_matrices(self.blocks)
        self.assertLess(np.max(np.abs(B @ homogeneous.reshape(-1))),
                        1e-10 * np.max(np.abs(self.blocks.F)) * np.max(np.abs(homogeneous)))
        for scale in (-1e-3, 1e-3):
            shifted = TangentSolution(v=tangent.v + scale * homogeneous, eta=tangent.eta)
            self.assertGreaterEqual(sensitivity.objective(shifted, self.blocks.alpha2, self.blocks.dt), best)

    def test_objective_value(self):
        tangent = TangentSolution(v=np.ones((3, 3)), eta=np.array([1.0, 2.0]))
        self.assertAlmostEqual(sensitivity.objective(tangent, 4.0, 0.5), 0.25 * (9.0 + 4.0 * 5.0))


class TestDirectSolve(unittest.TestCase):

    def test_matches_dense_solve(self):
        p = LorenzParams()
        blocks = kkt.assemble_blocks(lorenz_trajectory(p, 0.01, 16, spinup=5.0, seed=1), p, 'r', 40.0)
        system = kkt.schur_blocks(blocks)
        rhs = kkt.rhs_vector(blocks)
        expected = np.linalg.solve(system.to_dense(), rhs)
        np.testing.assert_allclose(sensitivity.direct_solve(system, rhs), expected, rtol=1e-8,
                                   atol=1e-10 * np.max(np.abs(expected)))

    def test_time_reversed_system_gives_reversed_solution(self):
        rng = np.random.default_rng(5)
        rows, n = 8, 3
        half = rng.standard_normal((rows // 2, n, n))
        diag = np.einsum('kij,klj->kil', half, half) + 10.0 * np.eye(n)
        diag = np.concatenate([diag, diag[::-1]])
        upper = 0.5 * rng.standard_normal((rows - 1, n, n))
        middle = rows // 2 - 1
        upper[middle] = 0.5 * (upper[middle] + upper[middle].T)
        upper[middle + 1:] = upper[:middle][::-1].transpose(0, 2, 1)
        system = BlockTridiag(lower=upper.transpose(0, 2, 1).copy(), diag=diag, upper=upper)
        rhs = rng.standard_normal((rows // 2, n))
        rhs = np.concatenate([rhs, rhs[::-1]]).reshape(-1)
        w = sensitivity.direct_solve(system, rhs).reshape(rows, n)
        np.testing.assert_allclose(w, w[::-1], rtol=1e-10, atol=1e-12 * np.max(np.abs(w)))

    def test_single_row(self):
        system = BlockTridiag.from_diagonal(np.array([[[2.0, 0.0], [0.0, 4.0]]]))
        np.testing.assert_allclose(sensitivity.direct_solve(system, np.array([2.0, 2.0])), [1.0, 0.5])

    def test_indefinite_pivot_fails(self):
        system = BlockTridiag.from_diagonal(np.stack([np.eye(3), -np.eye(3)]))
        with self.assertRaises(SingularBlockError) as context:
            sensitivity.direct_solve(system, np.ones(6))
        self.assertEqual(context.exception.block, 1)

    def test_size_guard(self):
        with self.assertRaises(GuardViolation):
            sensitivity.direct_solve(BlockTridiag.identity(10, 3), np.ones(30), max_rows=5)


class TestShadowingGradient(unittest.TestCase):

    def test_rayleigh_sensitivity(self):
        p = LorenzParams()
        traj = lorenz_trajectory(p, 0.01, 2000, spinup=100.0, seed=0)
        value = sensitivity.shadowing_gradient(traj, p, 'r', 40.0, sensitivity.quantity_of_interest('z'))
        self.assertGreater(value, 0.5)
        self.assertLess(value, 1.5)


if __name__ == "__main__":
    unittest.main()
