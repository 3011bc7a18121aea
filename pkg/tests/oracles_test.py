import unittest

import numpy as np
import scipy.sparse as sp

from core.errors import DimensionMismatchError
from core.geometry import box, project, whole_space
from core.oracles import (
    SampleSource, exact_f, exact_h, make_elastic_net, make_hinge_elm, make_least_squares,
    make_problem, make_quadratic, mean_hinge_loss, sample_subgrad_f, sample_subgrad_h,
)
from core.synthetic import make_rank_deficient_least_squares, make_sparse_classification, separating_weights


def enumerate_average(oracle, x):
    return sum(oracle.scenario_weight(i) * oracle.scenario_subgradient(x, i) for i in range(oracle.support_size))


class LeastSquaresOracleTests(unittest.TestCase):
    def test_consistent_system_has_zero_value(self):
        oracle = make_least_squares(np.eye(2), [1.0, 1.0])
        self.assertEqual(0.0, oracle.exact_value(np.array([1.0, 1.0])))

    def test_rank_deficient_example(self):
        oracle = make_least_squares([[1.0, 0.0], [1.0, 0.0]], [1.0, -1.0])
        self.assertEqual(2.0, oracle.exact_value(np.array([0.0, 5.0])))
        self.assertEqual(4.0, oracle.exact_value(np.array([1.0, 0.0])))

    def test_scenario_subgradient_is_scaled_row_gradient(self):
        A = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]])
        b = np.array([1.0, 0.0, 2.0])
        oracle = make_least_squares(A, b)
        x = np.array([0.5, -0.5])
        residual = A[2] @ x - b[2]
        np.testing.assert_allclose(2 * 3 * residual * A[2], oracle.scenario_subgradient(x, 2))

    def test_scenario_average_matches_exact_value_and_gradient(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((6, 4))
        b = rng.standard_normal(6)
        for matrix in (A, sp.csr_matrix(A)):
            oracle = make_least_squares(matrix, b)
            for _ in range(10):
                x = rng.standard_normal(4)
                average = np.mean([oracle.scenario_value(x, i) for i in range(6)])
                self.assertAlmostEqual(oracle.exact_value(x), average, delta=1e-10 * max(1.0, average))
                np.testing.assert_allclose(oracle.exact_subgradient(x), enumerate_average(oracle, x), atol=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            make_least_squares(np.ones((3, 2)), np.ones(2))

    def test_declared_bound_holds_on_box(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((5, 3))
        b = rng.standard_normal(5)
        oracle = make_least_squares(A, b)
        feasible_set = box(-2.0, 2.0, 3)
        bound = oracle.subgradient_bound(feasible_set.diameter_bound)
        for x in rng.uniform(-2.0, 2.0, (2000, 3)):
            for i in range(5):
                self.assertLessEqual(np.linalg.norm(oracle.scenario_subgradient(x, i)), bound)


class HingeOracleTests(unittest.TestCase):
    def test_zero_point_has_unit_loss(self):
        oracle = make_hinge_elm([({0: 1.0, 2: 0.5}, 1), ({1: 2.0}, -1)])
        self.assertEqual(1.0, oracle.exact_value(np.zeros(3)))

    def test_single_datum_with_large_margin(self):
        oracle = make_hinge_elm([(np.array([1.0]), 1)])
        self.assertEqual(0.0, oracle.exact_value(np.array([2.0])))

    def test_opposite_labels_average(self):
        oracle = make_hinge_elm([(np.array([1.0]), 1), (np.array([1.0]), -1)])
        self.assertEqual(1.0, oracle.exact_value(np.array([0.0])))

    def test_active_branch_gradient(self):
        oracle = make_hinge_elm([(np.array([1.0, -2.0]), -1)])
        np.testing.assert_array_equal([1.0, -2.0], oracle.scenario_subgradient(np.zeros(2), 0))

    def test_margin_exactly_one_gives_zero(self):
        oracle = make_hinge_elm([(np.array([1.0, 0.0]), 1)])
        np.testing.assert_array_equal([0.0, 0.0], oracle.scenario_subgradient(np.array([1.0, 3.0]), 0))

    def test_invalid_label(self):
        with self.assertRaises(ValueError):
            make_hinge_elm([(np.array([1.0]), 0)])

    def test_empty_data(self):
        with self.assertRaises(ValueError):
            make_hinge_elm([])

    def test_unbiased_including_ties(self):
        A, labels = make_sparse_classification(40, 60, 0.1, keywords=5, seed=2)
        oracle = make_hinge_elm([(A[i], int(labels[i])) for i in range(40)])
        for x in (np.zeros(60), separating_weights(60, keywords=5), np.linspace(-1, 1, 60)):
            np.testing.assert_allclose(oracle.exact_subgradient(x), enumerate_average(oracle, x), atol=1e-12)

    def test_bound_is_max_row_norm(self):
        oracle = make_hinge_elm([({0: 3.0, 1: 4.0}, 1), ({2: 1.0}, -1)])
        self.assertEqual(5.0, oracle.subgradient_bound(None))

    def test_separating_weights_reach_zero_loss(self):
        A, labels = make_sparse_classification(500, 200, 0.05, keywords=10, seed=4)
        oracle = make_hinge_elm([(A[i], int(labels[i])) for i in range(A.shape[0])])
        weights = separating_weights(200, keywords=10)
        self.assertEqual(0.0, oracle.exact_value(weights))
        self.assertEqual(0.0, mean_hinge_loss(oracle, weights, subsample=100, seed=1))
        self.assertEqual(1.0, mean_hinge_loss(oracle, np.zeros(200), subsample=100, seed=1))


class ElasticNetTests(unittest.TestCase):
    def test_subgradient_values(self):
        oracle = make_elastic_net(0.5, 3)
        np.testing.assert_array_equal([1.5, -2.0, 0.0], oracle.exact_subgradient(np.array([1.0, -2.0, 0.0])))
        np.testing.assert_array_equal([0.0, 0.0, 0.0], oracle.exact_subgradient(np.zeros(3)))
        np.testing.assert_allclose([2.0], make_elastic_net(0.1, 1).exact_subgradient(np.array([10.0])))

    def test_value(self):
        self.assertEqual(4.25, make_elastic_net(0.5, 3).exact_value(np.array([1.0, -2.0, 0.0])))

    def test_rejects_non_positive_modulus(self):
        with self.assertRaises(ValueError):
            make_elastic_net(0.0, 2)

    def test_strong_convexity_inequality(self):
        rng = np.random.default_rng(5)
        oracle = make_elastic_net(0.5, 4)
        for _ in range(1000):
            x, y = rng.standard_normal((2, 4))
            lower = oracle.exact_value(x) + oracle.exact_subgradient(x) @ (y - x) + 0.25 * (x - y) @ (x - y)
            self.assertGreaterEqual(oracle.exact_value(y), lower - 1e-9)


class ProblemTests(unittest.TestCase):
    def test_constants_on_compact_set(self):
        feasible_set = box(-1.0, 1.0, 2)
        problem = make_problem(make_quadratic([1.0, 0.0]), make_elastic_net(0.5, 2), feasible_set)
        M = np.sqrt(2.0)
        self.assertEqual(0.5, problem.mu_h)
        self.assertAlmostEqual(2.0 * M, problem.c_f)
        self.assertAlmostEqual(0.5 * M + np.sqrt(2.0), problem.c_h)
        self.assertTrue(problem.bounds_verified)

    def test_whole_space_bounds_are_unverified(self):
        with self.assertLogs("core.oracles", level="WARNING"):
            problem = make_problem(make_least_squares(np.eye(2), np.ones(2)), make_elastic_net(1.0, 2), whole_space(2))
        self.assertIsNone(problem.c_f)
        self.assertFalse(problem.bounds_verified)

    def test_outer_must_be_strongly_convex(self):
        with self.assertRaises(ValueError):
            make_problem(make_quadratic([1.0]), make_quadratic([0.0]), box(-1.0, 1.0, 1))

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            make_problem(make_quadratic([1.0, 1.0]), make_elastic_net(1.0, 3), box(-1.0, 1.0, 2))

    def test_subgradient_inequality_for_convex_inner(self):
        rng = np.random.default_rng(6)
        A, b = make_rank_deficient_least_squares(8, 4, 2, seed=3)
        oracle = make_least_squares(A, b)
        for _ in range(1000):
            x, y = rng.standard_normal((2, 4))
            self.assertGreaterEqual(oracle.exact_value(y), oracle.exact_value(x) + oracle.exact_subgradient(x) @ (y - x) - 1e-9)

    def test_exact_wrappers(self):
        problem = make_problem(make_quadratic([1.0]), make_elastic_net(1.0, 1), box(-1.0, 1.0, 1))
        self.assertEqual(0.25, exact_f(problem, [0.5]))
        self.assertEqual(0.625, exact_h(problem, [0.5]))


class SampleSourceTests(unittest.TestCase):
    def test_same_seed_same_stream(self):
        first, second = SampleSource(42), SampleSource(42)
        self.assertEqual([first.next_uniform() for _ in range(10_000)], [second.next_uniform() for _ in range(10_000)])

    def test_sampled_subgradients_are_reproducible(self):
        rng = np.random.default_rng(9)
        problem = make_problem(
            make_least_squares(rng.standard_normal((10, 3)), rng.standard_normal(10)),
            make_elastic_net(0.5, 3),
            box(-1.0, 1.0, 3),
        )
        points = [project(problem.feasible_set, x) for x in rng.standard_normal((50, 3))]

        def sequence(seed):
            src = SampleSource(seed)
            return np.array([np.concatenate([sample_subgrad_f(problem, x, src), sample_subgrad_h(problem, x, src)]) for x in points])

        np.testing.assert_array_equal(sequence(3), sequence(3))
        self.assertFalse(np.array_equal(sequence(3), sequence(4)))

    def test_deterministic_mode_returns_exact_subgradient_and_consumes_draws(self):
        oracle = make_least_squares(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([1.0, 1.0]))
        problem = make_problem(oracle, make_elastic_net(1.0, 2), box(-1.0, 1.0, 2), deterministic=True)
        src = SampleSource(0)
        x = np.array([0.2, -0.4])
        np.testing.assert_array_equal(oracle.exact_subgradient(x), sample_subgrad_f(problem, x, src))
        self.assertEqual(1, src.draws)

    def test_weighted_scenario_index(self):
        oracle = make_least_squares(np.eye(3), np.zeros(3))
        self.assertEqual(0, oracle.scenario_index(0.0))
        self.assertEqual(2, oracle.scenario_index(0.9999999))


if __name__ == "__main__":
    unittest.main()
