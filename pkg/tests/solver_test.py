import unittest

import numpy as np
import pandas as pd

from core.errors import DimensionMismatchError, ScheduleValidationError
from core.experiment import emit_rate_fit
from core.geometry import box, euclidean
from core.oracles import SampleSource, make_elastic_net, make_least_squares, make_problem, make_quadratic
from core.reference import solve_bilevel_bruteforce
from core.schedules import Schedule, constant_schedule, power_schedule, rate_schedule
from core.solver import closed_form_average, geometric_checkpoints, init, run, step
from core.synthetic import make_rank_deficient_least_squares


def one_dimensional_problem():
    """f(x) = x^2, h(x) = x^2 / 2 on [-1, 1]."""
    return make_problem(make_quadratic([1.0]), make_quadratic([0.5]), box(-1.0, 1.0, 1), deterministic=True)


def random_least_squares_problem(seed=0):
    rng = np.random.default_rng(seed)
    return make_problem(
        make_least_squares(rng.standard_normal((12, 4)), rng.standard_normal(12)),
        make_elastic_net(0.5, 4),
        box(-3.0, 3.0, 4),
    )


def without_timing(report):
    return report.to_frame().drop(columns=["elapsed_ms"])


class InitTests(unittest.TestCase):
    def test_initial_weight(self):
        state = init([1.0, 1.0], box(-2.0, 2.0, 2), Schedule(gamma0=1.0, lambda0=1.0, a=0.6, b=0.2))
        self.assertEqual(1.0, state.total_weight)
        self.assertEqual(0, state.k)
        np.testing.assert_array_equal(state.x, state.x_bar)

    def test_initial_weight_with_exponent(self):
        state = init([0.0], box(-1.0, 1.0, 1), Schedule(gamma0=2.0, lambda0=0.1, a=0.6, b=0.2, r=0.5))
        self.assertAlmostEqual(np.sqrt(2.0), state.total_weight)

    def test_infeasible_start_is_projected(self):
        with self.assertLogs("core.solver", level="WARNING"):
            state = init([3.0, -0.5], box(-1.0, 1.0, 2), rate_schedule(0.1))
        np.testing.assert_array_equal([1.0, -0.5], state.x)

    def test_refuses_large_initial_product(self):
        s = Schedule(gamma0=4.0, lambda0=1.0, a=0.6, b=0.2)
        with self.assertRaises(ScheduleValidationError):
            init([0.0], box(-1.0, 1.0, 1), s, l_omega=1.0, mu_h=1.0)
        with self.assertLogs("core.schedules", level="WARNING"):
            init([0.0], box(-1.0, 1.0, 1), s, l_omega=1.0, mu_h=1.0, override=True)


class StepTests(unittest.TestCase):
    def test_single_step_example(self):
        problem = one_dimensional_problem()
        s = constant_schedule(0.1, 1.0)
        state = init([1.0], problem.feasible_set, s)
        state = step(state, problem, euclidean(), problem.feasible_set, s, SampleSource(0))
        self.assertAlmostEqual(0.7, state.x[0], places=15)
        self.assertAlmostEqual(0.85, state.x_bar[0], places=15)
        self.assertEqual(1, state.k)
        self.assertEqual(2, state.samples)

    def test_zero_direction_is_a_fixed_point(self):
        problem = make_problem(make_quadratic([0.0]), make_quadratic([1.0], [0.3]), box(-1.0, 1.0, 1))
        s = rate_schedule(0.1)
        state = init([0.3], problem.feasible_set, s)
        state = step(state, problem, euclidean(), problem.feasible_set, s, SampleSource(0))
        self.assertEqual(0.3, state.x[0])

    def test_iterates_stay_feasible(self):
        problem = random_least_squares_problem()
        report = run(
            problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.05), np.zeros(4),
            2000, SampleSource(5), check_feasibility=True, capture_history=True,
        )
        for x in report.history:
            self.assertTrue(problem.feasible_set.contains(x))
        self.assertTrue(problem.feasible_set.contains(report.x_bar))


class RunTests(unittest.TestCase):
    def test_one_iteration_matches_step(self):
        problem = one_dimensional_problem()
        report = run(problem, euclidean(), problem.feasible_set, constant_schedule(0.1, 1.0), [1.0], 1, SampleSource(0))
        self.assertAlmostEqual(0.85, report.x_bar[0], places=15)
        self.assertEqual([1], [row.k for row in report.rows])
        self.assertEqual(2, report.samples)

    def test_deterministic_problem_converges_to_zero(self):
        problem = one_dimensional_problem()
        report = run(
            problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.1), [1.0],
            100_000, SampleSource(1), evaluate=False,
        )
        self.assertLessEqual(abs(report.x_bar[0]), 0.05)

    def test_feasibility_gap_decreases_after_burn_in(self):
        problem = one_dimensional_problem()
        report = run(
            problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.1), [1.0],
            10_000, SampleSource(1), checkpoints=range(100, 10_001, 100),
        )
        f_values = report.to_frame()["f_value"].to_numpy()
        self.assertTrue(np.all(np.diff(f_values) <= 0.0))

    def test_checkpoints(self):
        self.assertEqual([1, 2, 4, 8, 10], geometric_checkpoints(10))
        problem = one_dimensional_problem()
        report = run(problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.1), [1.0], 10, SampleSource(0))
        ks = [row.k for row in report.rows]
        self.assertEqual([1, 2, 4, 8, 10], ks)
        report = run(
            problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.1), [1.0], 10,
            SampleSource(0), checkpoints=[],
        )
        self.assertEqual([10], [row.k for row in report.rows])

    def test_trace_columns(self):
        problem = one_dimensional_problem()
        frame = run(problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.1), [1.0], 4, SampleSource(0)).to_frame()
        self.assertEqual(["k", "gamma", "lambda", "f_value", "h_value", "elapsed_ms"], list(frame.columns))
        self.assertTrue(frame["k"].is_monotonic_increasing)

    def test_same_seed_gives_identical_trace(self):
        problem = random_least_squares_problem()
        s = rate_schedule(0.1, gamma0=0.05)
        first = run(problem, euclidean(), problem.feasible_set, s, np.zeros(4), 3000, SampleSource(17))
        second = run(problem, euclidean(), problem.feasible_set, s, np.zeros(4), 3000, SampleSource(17))
        pd.testing.assert_frame_equal(without_timing(first), without_timing(second))
        np.testing.assert_array_equal(first.x_bar, second.x_bar)
        third = run(problem, euclidean(), problem.feasible_set, s, np.zeros(4), 3000, SampleSource(18))
        self.assertFalse(np.array_equal(first.x_bar, third.x_bar))

    def test_wall_clock_budget(self):
        problem = one_dimensional_problem()
        report = run(
            problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.1), [1.0],
            None, SampleSource(0), wall_clock=0.2, evaluate=False,
        )
        self.assertEqual("wall-clock", report.stopped_by)
        self.assertGreater(report.iterations, 0)
        self.assertGreaterEqual(report.elapsed_ms, 200.0)

    def test_budget_required(self):
        problem = one_dimensional_problem()
        with self.assertRaises(ValueError):
            run(problem, euclidean(), problem.feasible_set, rate_schedule(0.1), [1.0], None, SampleSource(0))
        with self.assertRaises(ValueError):
            run(problem, euclidean(), problem.feasible_set, rate_schedule(0.1), [1.0], 0, SampleSource(0))

    def test_generator_must_match_set_dimension(self):
        problem = one_dimensional_problem()
        with self.assertRaises(DimensionMismatchError):
            run(problem, euclidean(2), problem.feasible_set, rate_schedule(0.1), [1.0], 5, SampleSource(0))
        report = run(problem, euclidean(1), problem.feasible_set, rate_schedule(0.1), [1.0], 5, SampleSource(0))
        self.assertEqual(5, report.iterations)


class AveragingTests(unittest.TestCase):
    def test_recursion_matches_closed_form(self):
        problem = random_least_squares_problem(3)
        for r in (-1.0, 0.0, 0.5, 0.9):
            with self.subTest(r=r):
                s = rate_schedule(0.1, gamma0=0.05, r=r)
                report = run(
                    problem, euclidean(), problem.feasible_set, s, np.ones(4), 10_000, SampleSource(2),
                    evaluate=False, capture_history=True,
                )
                direct = closed_form_average(report.history, s, 10_000)
                scale = max(1.0, float(np.linalg.norm(direct)))
                self.assertLessEqual(float(np.linalg.norm(report.x_bar - direct)) / scale, 1e-10)

    def test_uniform_weights_give_arithmetic_mean(self):
        history = [np.array([0.0]), np.array([1.0]), np.array([5.0])]
        s = rate_schedule(0.1)
        np.testing.assert_allclose([2.0], closed_form_average(history, s, 2))
        np.testing.assert_array_equal([0.0], closed_form_average(history, s, 0))

    def test_weights_sum_to_one(self):
        history = [np.ones(3)] * 500
        s = rate_schedule(0.25, r=0.9)
        np.testing.assert_allclose(np.ones(3), closed_form_average(history, s, 499), atol=1e-12)


class BilevelConvergenceTests(unittest.TestCase):
    def test_two_dimensional_selection(self):
        feasible_set = box(-1.0, 1.0, 2)
        problem = make_problem(make_quadratic([1.0, 0.0]), make_elastic_net(0.5, 2), feasible_set, deterministic=True)
        reference = solve_bilevel_bruteforce(problem, feasible_set, 0.01)
        report = run(
            problem, euclidean(), feasible_set, power_schedule(0.25, 1.0, 0.55, 0.4), [0.8, -0.6],
            1_000_000, SampleSource(0), checkpoints=[1_000_000],
        )
        self.assertEqual(1_000_000, report.rows[-1].k)
        self.assertLessEqual(float(np.linalg.norm(report.x_bar - reference.x)), 0.05)
        self.assertLessEqual(abs(report.rows[-1].h_value - reference.h_star), 0.05)

    def test_least_squares_rate(self):
        A, b = make_rank_deficient_least_squares(8, 5, 3, seed=0)
        problem = make_problem(make_least_squares(A, b), make_elastic_net(0.5, 5), box(-10.0, 10.0, 5), deterministic=True)
        x_ls = np.linalg.lstsq(A, b, rcond=None)[0]
        f_star = float(np.sum((A @ x_ls - b) ** 2))
        report = run(
            problem, euclidean(), problem.feasible_set, rate_schedule(0.1, gamma0=0.5), np.zeros(5),
            1_000_000, SampleSource(0), checkpoints=[1_000, 10_000, 100_000, 1_000_000],
        )
        frame = report.to_frame()
        self.assertEqual([1_000, 10_000, 100_000, 1_000_000], frame["k"].tolist())
        gaps = pd.DataFrame({"k": frame["k"], "f_gap_mean": (frame["f_value"] - f_star).abs()})
        slope, _ = emit_rate_fit(gaps)
        self.assertLessEqual(slope, -0.25)
        self.assertLessEqual(float(gaps["f_gap_mean"].iloc[-1]), 1e-3)


if __name__ == "__main__":
    unittest.main()
