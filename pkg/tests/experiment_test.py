import contextlib
import io
import tempfile
import textwrap
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from core import data_io
from core.config import parse_config
from core.errors import ConfigError
from core.experiment import aggregate_traces, emit_rate_fit, run_experiment
from main import main


QUADRATIC_RUN = """
[problem]
kind = quadratic
weights = 1.0
deterministic = true

[outer]
kind = quadratic
weights = 0.5

[schedule]
delta = 0.1
gamma0 = 0.1
lambda0 = 1.0

[set]
kind = box
lower = -1
upper = 1

[run]
iterations = 200
paths = 2
seed = 0
workers = 1
x0 = constant:0.5
output = results
"""

LEAST_SQUARES_RUN = """
[problem]
kind = synthetic-least-squares
rows = 10
cols = 4
rank = 2

[outer]
mu_h = 0.5

[schedule]
delta = 0.1
gamma0 = {gamma0}
lambda0 = 1.0

[set]
kind = box
lower = -5
upper = 5

[run]
iterations = 100
"""

HINGE_RUN = """
[problem]
kind = synthetic-hinge
examples = 5000
features = 1000
density = 0.01
seed = 0

[outer]
mu_h = 0.1

[schedule]
delta = 0.1
gamma0 = 1.0
lambda0 = 1.0

[run]
iterations = 100000
paths = 15
seed = 0
reference = none
"""


class ConfigFileTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.root = Path(self._tmp.name)

    def write_config(self, text, name="run.ini"):
        path = self.root / name
        path.write_text(textwrap.dedent(text), encoding="utf-8")
        return path


class ParseConfigTests(ConfigFileTestCase):
    def test_accepts_rate_schedule(self):
        config = parse_config(self.write_config(LEAST_SQUARES_RUN.format(gamma0=1.0)))
        self.assertEqual(0.1, config.schedule.delta)
        self.assertAlmostEqual(0.55, config.schedule.a)
        self.assertAlmostEqual(0.4, config.schedule.b)
        self.assertEqual(0.5, config.outer.mu_h)
        self.assertEqual(100, config.iterations)
        self.assertIsNone(config.wall_clock)
        self.assertEqual(self.root / "results", config.output)

    def test_rejects_large_initial_product(self):
        path = self.write_config(LEAST_SQUARES_RUN.format(gamma0=4.0))
        with self.assertRaises(ConfigError):
            parse_config(path)
        with self.assertLogs("core.config", level="WARNING"):
            config = parse_config(path, override_validation=True)
        self.assertTrue(config.override_validation)

    def test_needs_exactly_one_budget(self):
        text = LEAST_SQUARES_RUN.format(gamma0=1.0) + "wall_clock = 10s\n"
        with self.assertRaises(ConfigError):
            parse_config(self.write_config(text))

    def test_overrides_and_removals(self):
        path = self.write_config(LEAST_SQUARES_RUN.format(gamma0=1.0))
        config = parse_config(path, {"run.seed": "7", "run.wall_clock": "1.5s"}, removals=["run.iterations"])
        self.assertEqual(7, config.seed)
        self.assertIsNone(config.iterations)
        self.assertEqual(1.5, config.wall_clock)

    def test_unknown_key(self):
        text = LEAST_SQUARES_RUN.format(gamma0=1.0) + "iteratons = 5\n"
        with self.assertRaises(ConfigError):
            parse_config(self.write_config(text))

    def test_missing_data_file(self):
        text = LEAST_SQUARES_RUN.format(gamma0=1.0).replace(
            "kind = synthetic-least-squares", "kind = least-squares\nmatrix = A.csv\nrhs = b.csv",
        )
        with self.assertRaises(FileNotFoundError):
            parse_config(self.write_config(text))

    def test_data_paths_resolve_against_config_directory(self):
        data_io.write_dense_matrix(np.eye(2), self.root / "A.csv")
        data_io.write_vector(np.ones(2), self.root / "b.csv")
        text = LEAST_SQUARES_RUN.format(gamma0=1.0).replace(
            "kind = synthetic-least-squares", "kind = least-squares\nmatrix = A.csv\nrhs = b.csv",
        )
        config = parse_config(self.write_config(text))
        self.assertEqual(self.root / "A.csv", config.problem.path("matrix"))

    def test_schedule_needs_delta_or_exponents(self):
        text = LEAST_SQUARES_RUN.format(gamma0=1.0).replace("delta = 0.1", "a = 0.6")
        with self.assertRaises(ConfigError):
            parse_config(self.write_config(text))

    def test_rejects_schedule_failing_convergence_conditions(self):
        text = LEAST_SQUARES_RUN.format(gamma0=1.0).replace("delta = 0.1", "a = 0.4\nb = 0.1")
        path = self.write_config(text)
        with self.assertRaises(ConfigError):
            parse_config(path)
        with self.assertLogs("core.config", level="WARNING") as logs:
            config = parse_config(path, override_validation=True)
        self.assertTrue(config.schedule.override)
        self.assertIn("convergence conditions", "\n".join(logs.output))

    def test_recursive_bound_failure_is_not_a_warning(self):
        with self.assertLogs("core.config", level="INFO") as logs:
            config = parse_config(self.write_config(LEAST_SQUARES_RUN.format(gamma0=1.0)))
        self.assertFalse(config.schedule.override)
        self.assertTrue(all(record.levelname == "INFO" for record in logs.records))


class RunExperimentTests(ConfigFileTestCase):
    def test_writes_outputs(self):
        result = run_experiment(parse_config(self.write_config(QUADRATIC_RUN)))
        self.assertEqual(0, result.exit_status)
        for name in ("path_000.csv", "path_001.csv", "aggregate.csv", "f_gap.dat", "h_gap.dat", "summary.txt"):
            self.assertTrue((result.output / name).is_file(), name)
        summary = data_io.read_summary(result.output / "summary.txt")
        self.assertEqual("SelectaFlow", summary["application"])
        self.assertEqual("2", summary["completed_paths"])
        self.assertEqual("brute-force", summary["f_star_source"])
        self.assertRegex(summary["elapsed"], r"^\d{2}:\d{2}:\d{2}\.\d{3}$")
        self.assertEqual(200, int(result.aggregate["k"].iloc[-1]))
        self.assertEqual(list(data_io.AGGREGATE_HEADER), list(result.aggregate.columns))
        trace = data_io.read_trace(result.output / "path_000.csv")
        self.assertTrue(trace["f_gap"].ge(0.0).all())

    def test_rerun_is_identical(self):
        path = self.write_config(QUADRATIC_RUN)
        first = run_experiment(parse_config(path)).aggregate
        second = run_experiment(parse_config(path)).aggregate
        pd.testing.assert_frame_equal(first, second, check_exact=True)

    def test_worker_pool_matches_serial_run(self):
        path = self.write_config(QUADRATIC_RUN)
        serial = run_experiment(parse_config(path)).aggregate
        pooled = run_experiment(parse_config(path, {"run.workers": "2", "run.output": "pooled"})).aggregate
        pd.testing.assert_frame_equal(serial, pooled, check_exact=True)

    def test_path_does_not_depend_on_path_count(self):
        path = self.write_config(QUADRATIC_RUN)
        single = run_experiment(parse_config(path, {"run.paths": "1", "run.output": "single"}))
        double = run_experiment(parse_config(path, {"run.output": "double"}))
        columns = ["k", "gamma", "lambda", "f_gap", "h_gap"]
        pd.testing.assert_frame_equal(
            single.paths[0].trace[columns], double.paths[0].trace[columns], check_exact=True,
        )
        np.testing.assert_array_equal(single.paths[0].x_bar, double.paths[0].x_bar)

    def test_wall_clock_budget(self):
        config = parse_config(
            self.write_config(QUADRATIC_RUN),
            {"run.wall_clock": "200ms", "run.paths": "1"},
            removals=["run.iterations"],
        )
        result = run_experiment(config)
        self.assertEqual(0, result.exit_status)
        self.assertEqual("wall-clock", result.paths[0].stopped_by)
        self.assertGreater(result.paths[0].iterations, 0)

    def test_aggregate_of_identical_paths_has_zero_error(self):
        trace = pd.DataFrame({"k": [1, 2], "f_gap": [0.5, 0.25], "h_gap": [1.0, 2.0]})
        frame = aggregate_traces([trace, trace.copy()])
        np.testing.assert_array_equal([0.5, 0.25], frame["f_gap_mean"])
        np.testing.assert_array_equal([0.0, 0.0], frame["f_gap_se"])
        np.testing.assert_array_equal([2, 2], frame["paths"])


class HingeExperimentTests(ConfigFileTestCase):
    def test_separable_data_reaches_small_hinge_loss(self):
        result = run_experiment(parse_config(self.write_config(HINGE_RUN)))
        self.assertEqual(0, result.exit_status)
        self.assertEqual(15, len(result.paths))
        self.assertEqual("lower-bound", result.summary["f_star_source"])
        self.assertLessEqual(result.summary["hinge_loss_mean"], 0.1)
        for path in result.paths:
            with self.subTest(path=path.index):
                self.assertEqual(100_000, path.iterations)
                tail = path.trace[path.trace["k"] >= 1000]
                gaps = tail["f_gap"].to_numpy()
                self.assertLess(gaps[-1], gaps[0])
                slope = np.polyfit(np.log(tail["k"].to_numpy(dtype=float)), gaps, 1)[0]
                self.assertLess(slope, 0.0)


class RateFitTests(unittest.TestCase):
    def test_recovers_power_law(self):
        ks = np.array([1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024])
        frame = pd.DataFrame({"k": ks, "f_gap_mean": 3.0 * ks ** -0.4})
        slope, intercept = emit_rate_fit(frame)
        self.assertAlmostEqual(-0.4, slope, delta=1e-6)
        self.assertAlmostEqual(np.log(3.0), intercept, delta=1e-6)

    def test_constant_gap_has_zero_slope(self):
        frame = pd.DataFrame({"k": [1, 2, 4, 8, 16, 32], "f_gap_mean": [0.1] * 6})
        slope, _ = emit_rate_fit(frame)
        self.assertAlmostEqual(0.0, slope, delta=1e-9)

    def test_too_few_points(self):
        with self.assertRaises(ValueError):
            emit_rate_fit(pd.DataFrame({"k": [1, 2, 4], "f_gap_mean": [1.0, 0.5, 0.25]}))
        with self.assertRaises(ValueError):
            emit_rate_fit(pd.DataFrame({"k": [1, 2, 4, 8], "f_gap_mean": [1.0, 0.0, 0.0, 0.5]}))


class CommandLineTests(ConfigFileTestCase):
    def run_main(self, argv):
        out = io.StringIO()
        with contextlib.redirect_stdout(out):
            status = main(argv)
        return status, out.getvalue()

    def test_validate_rate_schedule(self):
        status, text = self.run_main(["--log-level", "ERROR", "validate", "--delta", "0.1"])
        self.assertEqual(0, status)
        self.assertTrue(text.strip())

    def test_validate_needs_exponents(self):
        self.assertEqual(2, self.run_main(["--log-level", "ERROR", "validate", "--a", "0.6"])[0])

    def test_fit_command(self):
        ks = np.array([1, 2, 4, 8, 16, 32, 64, 128])
        path = self.root / "aggregate.csv"
        pd.DataFrame({"k": ks, "f_gap_mean": ks ** -0.5}).to_csv(path, index=False)
        status, text = self.run_main(["--log-level", "ERROR", "fit", str(path)])
        self.assertEqual(0, status)
        self.assertIn("slope = -0.5", text)

    def test_run_command(self):
        path = self.write_config(QUADRATIC_RUN)
        status, _ = self.run_main(["--log-level", "ERROR", "run", str(path), "--iterations", "20", "--paths", "1"])
        self.assertEqual(0, status)
        self.assertEqual("20", data_io.read_summary(self.root / "results" / "summary.txt")["iterations"])

    def test_bad_config_returns_error_status(self):
        path = self.write_config(LEAST_SQUARES_RUN.format(gamma0=4.0))
        self.assertEqual(2, self.run_main(["--log-level", "ERROR", "run", str(path)])[0])


if __name__ == "__main__":
    unittest.main()
