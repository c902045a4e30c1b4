#!/usr/bin/env python3
"""
Test suite for the experiment harness, result files and command line

Features tested:
- Atomic writes and deterministic CSV/JSON rendering
- Worker resolution and order-preserving parallel maps
- Small runs of every scenario with their files, summary and manifest
- Byte-identical outputs for one and two workers
- Plot data assembly and missing-file reporting
- Command-line exit codes
"""

import io
import os
import shutil
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from fractions import Fraction
from unittest.mock import patch

# Add src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src import harness
from src.bounds import Empirical
from src.config import Scenario
from src.harness import (
    MissingOutputsError,
    emit_plotdata,
    load_manifest,
    parallel_map,
    resolve_workers,
    run_scenario,
    stream_id,
    sweep_pairs,
    task_delay_cdf,
)
from src.main import EXIT_CHECK, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from src.model import Deterministic, SystemConfig
from src.persistence import (
    atomic_write,
    format_value,
    read_csv,
    read_json,
    render_csv,
    render_json,
    sha256_file,
)


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class TestPersistence(unittest.TestCase):
    """Test suite for result file writing"""

    def setUp(self):
        """Set up test fixtures"""
        self.temp_dir = tempfile.mkdtemp()
        self.path = os.path.join(self.temp_dir, "data.csv")

    def tearDown(self):
        """Clean up test fixtures"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_write_and_overwrite(self):
        """Test atomic writes leave no temporary or backup files"""
        atomic_write(self.path, "first\n")
        atomic_write(self.path, "second\n")
        with open(self.path) as f:
            self.assertEqual(f.read(), "second\n")
        self.assertEqual(os.listdir(self.temp_dir), ["data.csv"])

    def test_failed_replace_keeps_original(self):
        """Test a failing rename restores the previous content"""
        atomic_write(self.path, "original\n")
        with patch("src.persistence.os.replace", side_effect=OSError("disk full")):
            with self.assertRaises(OSError):
                atomic_write(self.path, "replacement\n")
        with open(self.path) as f:
            self.assertEqual(f.read(), "original\n")
        self.assertEqual(os.listdir(self.temp_dir), ["data.csv"])

    def test_missing_directory(self):
        """Test writing into a missing directory"""
        with self.assertRaises(FileNotFoundError):
            atomic_write(os.path.join(self.temp_dir, "absent", "x.csv"), "x")
        with self.assertRaises(ValueError):
            atomic_write("", "x")

    def test_format_value(self):
        """Test CSV cell rendering"""
        self.assertEqual(format_value(0.1), "0.10000000000000001")
        self.assertEqual(float(format_value(2.0 / 3.0)), 2.0 / 3.0)
        self.assertEqual(format_value(None), "")
        self.assertEqual(format_value(True), "true")
        self.assertEqual(format_value(7), "7")
        self.assertEqual(format_value(Fraction(-1, 12)), "-1/12")
        self.assertEqual(format_value(float("nan")), "nan")

    def test_render(self):
        """Test CSV shape checks and sorted JSON keys"""
        self.assertEqual(render_csv(("a", "b"), [(1, 0.5)]), "a,b\n1,0.5\n")
        with self.assertRaises(ValueError):
            render_csv(("a", "b"), [(1,)])
        self.assertEqual(render_json({"b": 1, "a": Fraction(1, 3)}), '{\n  "a": "1/3",\n  "b": 1\n}\n')

    def test_checksum(self):
        """Test SHA-256 of a known string"""
        with open(self.path, "w") as f:
            f.write("abc")
        self.assertEqual(
            sha256_file(self.path),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad",
        )


class TestWorkers(unittest.TestCase):
    """Test suite for worker resolution and streams"""

    def test_resolve_workers(self):
        """Test explicit values, the environment variable and the fallback"""
        self.assertEqual(resolve_workers(3), 3)
        with self.assertRaises(ValueError):
            resolve_workers(0)
        with patch.dict(os.environ, {harness.THREADS_ENV: "2"}):
            self.assertEqual(resolve_workers(), 2)
        with patch.dict(os.environ, {harness.THREADS_ENV: "many"}):
            with self.assertRaises(ValueError):
                resolve_workers()
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual(resolve_workers(), os.cpu_count() or 1)

    def test_parallel_map_order(self):
        """Test results come back in input order"""
        items = [-3, 1, -4, 1, -5, 9]
        self.assertEqual(parallel_map(abs, items, 1), [3, 1, 4, 1, 5, 9])
        self.assertEqual(parallel_map(abs, items, 2), [3, 1, 4, 1, 5, 9])

    def test_stream_ids_distinct(self):
        """Test configurations, replications and purposes get separate streams"""
        ids = {
            stream_id(c, r, purpose)
            for c in range(3) for r in range(3) for purpose in (0, 1, 2, 3)
        }
        self.assertEqual(len(ids), 36)

    def test_sweep_pairs(self):
        """Test explicit pairs, exponent sweeps and defaults"""
        figure1 = sweep_pairs(Scenario(name="figure1"), default_n_values=harness.FIGURE1_N_VALUES)
        self.assertEqual(figure1[:3], [(4, 2), (4, 3), (4, 4)])
        self.assertIn((64, 16), figure1)
        self.assertIn((1024, 512), figure1)
        self.assertEqual(len(figure1), 11)
        explicit = Scenario(name="figure1", pairs=((8, 2), (8, 2)))
        self.assertEqual(sweep_pairs(explicit, default_n_values=(4,)), [(8, 2)])
        self.assertEqual(sweep_pairs(Scenario(name="assoc"), default_pairs=harness.ASSOC_PAIRS), list(harness.ASSOC_PAIRS))

    def test_task_delay_cdf(self):
        """Test non-exponential service gets an empirical F"""
        config = SystemConfig(n=4, k=2, service=Deterministic(1.0))
        self.assertIsInstance(task_delay_cdf(config), Empirical)


class TestScenarioRuns(unittest.TestCase):
    """Test suite for run_scenario and emit_plotdata"""

    def setUp(self):
        """Set up test fixtures"""
        self.temp_dir = tempfile.mkdtemp()
        self.system = SystemConfig(n=4, k=2, horizon_jobs=5000)

    def tearDown(self):
        """Clean up test fixtures"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def scenario(self, name, subdir="out", **changes):
        return Scenario(name=name, replications=2, output_dir=os.path.join(self.temp_dir, subdir), **changes)

    def test_dominance_outputs(self):
        """Test CCDF files, summary and manifest of a small dominance run"""
        manifest = run_scenario(self.scenario("dominance", pairs=((4, 2),)), self.system, workers=1)
        self.assertEqual(
            sorted(manifest.outputs),
            ["dominance_n4_k2_rho0p6667.csv", "summary.json", "workload_covariance.csv"],
        )
        covariance_jobs = harness.snapshot_jobs(self.system, 20_000, 2.0)
        self.assertAlmostEqual(covariance_jobs, 25_000 * 2 * 4 / 3, delta=1)
        self.assertEqual(manifest.jobs_simulated, 10_000 + covariance_jobs)
        for name, checksum in manifest.outputs.items():
            self.assertEqual(sha256_file(os.path.join(manifest.directory, name)), checksum)

        rows = read_csv(os.path.join(manifest.directory, "dominance_n4_k2_rho0p6667.csv"))
        self.assertEqual(len(rows), 200)
        self.assertEqual(list(rows[0]), list(harness.CCDF_COLUMNS))
        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        (point,) = summary["results"]["points"]
        self.assertEqual((point["n"], point["k"], point["jobs"]), (4, 2, 8000))
        self.assertIn("dominated_n4_k2_rho0p6667", summary["verdicts"])
        self.assertAlmostEqual(point["harmonic_mean"], 4.5)

        loaded = load_manifest(manifest.path)
        self.assertEqual(loaded.outputs, manifest.outputs)
        self.assertEqual(loaded.series, manifest.series)
        self.assertEqual(loaded.jobs_simulated, manifest.jobs_simulated)

    def test_outputs_independent_of_workers(self):
        """Test one and two workers write byte-identical data files"""
        serial = run_scenario(self.scenario("dominance", "serial", pairs=((4, 2), (4, 4))), self.system, workers=1)
        parallel = run_scenario(self.scenario("dominance", "parallel", pairs=((4, 2), (4, 4))), self.system, workers=2)
        self.assertEqual(serial.outputs, parallel.outputs)
        for name in serial.outputs:
            self.assertEqual(
                read_bytes(os.path.join(serial.directory, name)),
                read_bytes(os.path.join(parallel.directory, name)),
            )

    def test_seed_changes_output(self):
        """Test a different seed gives different data"""
        first = run_scenario(self.scenario("dominance", "a", pairs=((4, 2),)), self.system, workers=1)
        second = run_scenario(self.scenario("dominance", "b", pairs=((4, 2),)), self.system.with_updates(seed=2), workers=1)
        self.assertNotEqual(first.outputs["summary.json"], second.outputs["summary.json"])

    def test_loads_in_file_names(self):
        """Test load sweeps label files by rho"""
        manifest = run_scenario(
            self.scenario("dominance", pairs=((4, 2),), loads=(Fraction(1, 2),)), self.system, workers=1
        )
        self.assertIn("dominance_n4_k2_rho0p5.csv", manifest.outputs)
        self.assertEqual(manifest.series[0]["rho"], 0.5)

    def test_plotdata_round_trip(self):
        """Test plot rows reproduce the summary's sup gap"""
        manifest = run_scenario(self.scenario("dominance", pairs=((4, 2),)), self.system, workers=1)
        path = emit_plotdata(manifest.path)
        self.assertEqual(path, os.path.join(manifest.directory, "plotdata.csv"))
        rows = read_csv(path)
        self.assertEqual(len(rows), 400)
        self.assertEqual(list(rows[0]), list(harness.PLOTDATA_COLUMNS))
        empirical = [float(r["value"]) for r in rows if r["series"] == "empirical"]
        bound = [float(r["value"]) for r in rows if r["series"] == "bound"]
        gap = max(abs(a - b) for a, b in zip(empirical, bound))
        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        self.assertAlmostEqual(gap, summary["results"]["points"][0]["sup_gap"], delta=1e-12)

    def test_plotdata_missing_files(self):
        """Test absent CCDF files are all listed"""
        manifest = run_scenario(self.scenario("dominance", pairs=((4, 2), (4, 3))), self.system, workers=1)
        for entry in manifest.series:
            os.remove(os.path.join(manifest.directory, entry["file"]))
        with self.assertRaises(MissingOutputsError) as context:
            emit_plotdata(manifest)
        self.assertEqual(len(context.exception.missing), 2)
        with self.assertRaises(MissingOutputsError):
            emit_plotdata(os.path.join(self.temp_dir, "nowhere", "manifest.json"))

    def test_assoc_run(self):
        """Test the association scenario's verdicts and exact values"""
        manifest = run_scenario(self.scenario("assoc", pairs=((4, 2),)), self.system, workers=1)
        self.assertEqual(
            manifest.verdicts,
            {"associated_at_threshold_n4_k2": True, "violated_without_oversampling_n4_k2": True},
        )
        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        without, at_threshold = summary["results"]["points"]
        self.assertEqual(without["counterexample"]["gap"], "-1/12")
        self.assertEqual(without["covariances"], {"1,2": "-1/12"})
        self.assertEqual(at_threshold["beta"], "38/9")
        self.assertEqual(len(read_csv(os.path.join(manifest.directory, "assoc_results.csv"))), 2)

        path = emit_plotdata(manifest)
        self.assertEqual(read_bytes(path), b"scenario,n,k,tau,series,value,ci,rho\n")

    def test_coupling_run(self):
        """Test the coupling scenario's per-run file and structural verdicts"""
        scenario = self.scenario("coupling", coupling_runs=300, coupling_horizon=1.0)
        manifest = run_scenario(scenario, SystemConfig(n=16, k=4), workers=1)
        rows = read_csv(os.path.join(manifest.directory, "coupling_n16_k4_rho0p6667.csv"))
        self.assertEqual(len(rows), 300)
        self.assertEqual([r["run"] for r in rows[:3]], ["0", "1", "2"])
        self.assertTrue(manifest.verdicts["difference_implies_divergence_n16_k4_rho0p6667"])
        self.assertTrue(manifest.verdicts["p_select_le1_enumeration_n16_k4"])

    def test_busy_run(self):
        """Test the busy-period scenario file"""
        manifest = run_scenario(self.scenario("busy", busy_samples=2000), self.system, workers=1)
        rows = read_csv(os.path.join(manifest.directory, "busy_rho0p6667.csv"))
        self.assertEqual(len(rows), 2000)
        self.assertIn("busy_mean_rho0p6667", manifest.verdicts)

    def test_single_queue_run(self):
        """Test the single-queue scenario file and verdicts"""
        system = SystemConfig(n=1, k=1, horizon_jobs=20_000)
        manifest = run_scenario(self.scenario("single-queue"), system, workers=1)
        self.assertIn("single_queue_rho0p6667.csv", manifest.outputs)
        self.assertIn("mean_sojourn_rho0p6667", manifest.verdicts)
        self.assertIn("kolmogorov_rho0p6667", manifest.verdicts)

    def test_theorem3_run(self):
        """Test the two-queue snapshot scenario writes pmf files and verdicts"""
        scenario = self.scenario("theorem3", pairs=((8, 4), (16, 8)), snapshots=5000)
        manifest = run_scenario(scenario, SystemConfig(n=8, k=4), workers=1)
        self.assertIn("theorem3_n8_k4_pmf.csv", manifest.outputs)
        self.assertIn("theorem3_n16_k8_pmf.csv", manifest.outputs)
        self.assertIn("tv_nondecreasing", manifest.verdicts)
        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        first = summary["results"]["points"][0]
        self.assertEqual(first["product_residual"], "-2/567")
        self.assertEqual(first["epsilon"], "1/1224")

    def test_theorem3_requires_exponential(self):
        """Test snapshot scenarios refuse other service laws"""
        system = SystemConfig(n=8, k=4, service=Deterministic(1.0))
        with self.assertRaises(ValueError):
            run_scenario(self.scenario("theorem3", snapshots=100), system, workers=1)

    def test_scaling_run(self):
        """Test the scaling scenario adds the coupling time scale"""
        scenario = self.scenario("scaling", n_values=(16,), k_exponents=(Fraction(1, 2),))
        manifest = run_scenario(scenario, SystemConfig(n=16, k=4, horizon_jobs=5000), workers=1)
        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        (point,) = summary["results"]["points"]
        self.assertEqual((point["n"], point["k"]), (16, 4))
        self.assertEqual(point["coupling_tau"], 1.0)
        self.assertGreater(point["coupling_divergence"], 0.0)
        self.assertGreaterEqual(point["thinning_divergence"], 0.0)

    def test_workload_covariance_outputs(self):
        """Test dominance runs report the workload covariance of queues 1 and 2"""
        scenario = self.scenario("dominance", pairs=((4, 4), (4, 2)), covariance_snapshots=10_000)
        manifest = run_scenario(scenario, self.system, workers=1)
        rows = read_csv(os.path.join(manifest.directory, harness.COVARIANCE_FILE))
        self.assertEqual(len(rows), 2)
        self.assertEqual(list(rows[0]), list(harness.COVARIANCE_COLUMNS))
        self.assertEqual([(r["n"], r["k"]) for r in rows], [("4", "4"), ("4", "2")])
        self.assertTrue(manifest.verdicts["workload_covariance_positive_n4_k4_rho0p6667"])
        self.assertNotIn("workload_covariance_positive_n4_k2_rho0p6667", manifest.verdicts)

        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        full, limited = summary["results"]["workload_covariance"]
        self.assertGreater(full["covariance"], 0.0)
        self.assertTrue(full["resolved"])
        self.assertEqual((limited["n"], limited["k"]), (4, 2))

    def test_regime_verdicts_small_k(self):
        """Test n = 1024 with k below n^(1/3) gets the sup-gap verdict"""
        scenario = self.scenario("figure1", pairs=((1024, 4),))
        manifest = run_scenario(scenario, self.system, workers=1)
        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        (point,) = summary["results"]["points"]
        self.assertEqual(manifest.verdicts["tight_n1024_k4_rho0p6667"], point["sup_gap"] <= 0.02)
        self.assertNotIn("divergent_n1024_k4_rho0p6667", manifest.verdicts)

    def test_regime_verdicts_large_k(self):
        """Test n = 1024 with k at n^(9/10) gets the mean-gap verdict"""
        scenario = self.scenario("figure1", pairs=((1024, 512),))
        manifest = run_scenario(scenario, self.system.with_updates(horizon_jobs=2000), workers=1)
        summary = read_json(os.path.join(manifest.directory, "summary.json"))
        (point,) = summary["results"]["points"]
        expected = (
            point["mean_gap_relative"] >= 0.05
            and point["mean_delay"] + point["mean_delay_halfwidth"] < point["bound_mean"]
        )
        self.assertEqual(manifest.verdicts["divergent_n1024_k512_rho0p6667"], expected)
        self.assertNotIn("tight_n1024_k512_rho0p6667", manifest.verdicts)


class TestRegimeChecks(unittest.TestCase):
    """Test suite for the large-system regime verdicts"""

    def test_small_systems_unchecked(self):
        """Test systems below n = 1024 get no regime checks"""
        self.assertEqual(harness.regime_checks(64, 4, 0.5, 9.0, 0.1, 10.0), {})
        self.assertEqual(harness.regime_checks(512, 512, 0.5, 1.0, 0.1, 10.0), {})

    def test_tight_regime(self):
        """Test the sup gap limit for k up to ceil(n^(1/3))"""
        self.assertEqual(harness.regime_checks(1024, 11, 0.01, 5.0, 0.1, 5.0), {"tight": True})
        self.assertEqual(harness.regime_checks(1024, 11, 0.03, 5.0, 0.1, 5.0), {"tight": False})
        self.assertEqual(harness.regime_checks(1024, 4, 0.02, 5.0, 0.1, 5.0), {"tight": True})

    def test_intermediate_regime(self):
        """Test k strictly between the two exponents is unchecked"""
        self.assertEqual(harness.regime_checks(1024, 12, 0.5, 10.0, 1.0, 10.0), {})
        self.assertEqual(harness.regime_checks(1024, 100, 0.5, 10.0, 1.0, 10.0), {})

    def test_divergent_regime(self):
        """Test the mean gap needs 5% and a confidence interval clear of the bound"""
        self.assertEqual(harness.regime_checks(1024, 512, 0.2, 9.0, 0.5, 10.0), {"divergent": True})
        self.assertEqual(harness.regime_checks(1024, 1024, 0.2, 9.0, 0.5, 10.0), {"divergent": True})
        # gap of 4%
        self.assertEqual(harness.regime_checks(1024, 512, 0.2, 9.6, 0.1, 10.0), {"divergent": False})
        # interval reaches the bound
        self.assertEqual(harness.regime_checks(1024, 512, 0.2, 9.0, 1.5, 10.0), {"divergent": False})


class TestCommandLine(unittest.TestCase):
    """Test suite for the forkjoin command"""

    def setUp(self):
        """Set up test fixtures"""
        self.temp_dir = tempfile.mkdtemp()
        self.config = os.path.join(self.temp_dir, "assoc.ini")
        with open(self.config, "w") as f:
            f.write("[scenario]\nname = assoc\npairs = 4:2\n")

    def tearDown(self):
        """Clean up test fixtures"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def run_main(self, argv):
        with redirect_stdout(io.StringIO()) as out:
            code = main(argv)
        return code, out.getvalue()

    def test_run(self):
        """Test a successful run writes its manifest"""
        out_dir = os.path.join(self.temp_dir, "results")
        code, output = self.run_main(
            ["-q", "run", "assoc", "--config", self.config, "--out", out_dir, "--threads", "1", "--check"]
        )
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.isfile(os.path.join(out_dir, "assoc", "manifest.json")))
        self.assertIn("PASS  associated_at_threshold_n4_k2", output)

    def test_failed_check(self):
        """Test --check turns a failed verdict into exit status 3"""
        def failing(run):
            run.verdict("always_fails", False)
            return {}

        out_dir = os.path.join(self.temp_dir, "results")
        with patch.dict(harness.RUNNERS, {"assoc": failing}):
            argv = ["-q", "run", "assoc", "--config", self.config, "--out", out_dir, "--threads", "1"]
            self.assertEqual(self.run_main(argv)[0], EXIT_OK)
            self.assertEqual(self.run_main(argv + ["--check"])[0], EXIT_CHECK)

    def test_config_error(self):
        """Test an invalid file exits with status 2"""
        bad = os.path.join(self.temp_dir, "bad.ini")
        with open(bad, "w") as f:
            f.write("[system]\nn = 4\nk = 5\n")
        self.assertEqual(self.run_main(["-q", "run", "assoc", "--config", bad])[0], EXIT_CONFIG)
        missing = os.path.join(self.temp_dir, "missing.ini")
        self.assertEqual(self.run_main(["-q", "run", "assoc", "--config", missing])[0], EXIT_CONFIG)

    def test_verify_assoc(self):
        """Test the single association check and its exit codes"""
        code, output = self.run_main(["-q", "verify-assoc", "--n", "4", "--k", "2", "--beta", "0"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("associated: False", output)
        self.assertIn("gap=-1/12", output)
        self.assertIn("Cov(A1, A2) = -1/12", output)
        self.assertEqual(
            self.run_main(["-q", "verify-assoc", "--n", "4", "--k", "2", "--beta", "0", "--check"])[0],
            EXIT_CHECK,
        )
        self.assertEqual(self.run_main(["-q", "verify-assoc", "--n", "4", "--k", "2", "--check"])[0], EXIT_OK)
        self.assertEqual(self.run_main(["-q", "verify-assoc", "--n", "4", "--k", "5"])[0], EXIT_CONFIG)
        self.assertEqual(self.run_main(["-q", "verify-assoc", "--n", "12", "--k", "6"])[0], EXIT_CONFIG)

    def test_plotdata_missing_manifest(self):
        """Test plot data for an absent manifest exits with status 1"""
        missing = os.path.join(self.temp_dir, "manifest.json")
        self.assertEqual(self.run_main(["-q", "plotdata", missing])[0], EXIT_MISSING)

    def test_version(self):
        """Test --version prints and exits"""
        with self.assertRaises(SystemExit) as context:
            self.run_main(["--version"])
        self.assertEqual(context.exception.code, 0)


if __name__ == '__main__':
    unittest.main()
