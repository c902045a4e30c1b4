"""
Fork-Join Lab - Experiment Harness

This module runs the named experiments, fans replications out to a worker
pool and writes every data file from the collecting process.

Features:
- Scenarios: figure1, dominance, coupling, busy, assoc, theorem3, scaling,
  single-queue
- Deterministic per-replication streams; merged statistics do not depend
  on the number of workers
- Per-(n, k) CCDF files, a summary with acceptance verdicts and a manifest
  with checksums and job accounting
- Long-format plot data assembled from a manifest
"""

from __future__ import annotations

import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import __version__
from .association import arrival_pattern_dist, beta_threshold, check_association, covariance_check
from .bounds import (
    AnalyticMM1,
    Empirical,
    TaskDelayCdf,
    asymptotic_mean_mm1,
    bound_mean,
    busy_period_mean,
    ccdf_grid,
    independence_ccdf,
    mg1_mean_sojourn,
)
from .config import Scenario, default_config
from .metrics import (
    balance_residual,
    balance_residual_estimate,
    batch_means,
    epsilon_theorem3,
    estimate_ccdf,
    joint_pmf,
    kolmogorov_distance,
    limiting_product_residual,
    product_geometric_pmf,
    sup_distance,
    tv_distance,
    workload_covariance,
)
from .model import (
    CombinatorialContext,
    Exponential,
    ServiceDistribution,
    SystemConfig,
    as_fraction,
    ceil_power,
    p_select_le1,
    random_stream,
)
from .persistence import read_csv, read_json, sha256_file, write_csv, write_json
from .simulator import (
    busy_period_experiment,
    coupling_time_scale,
    pe_exact,
    pe_thinning_exact,
    sample_queue_lengths,
    sample_workloads,
    simulate_coupled,
    simulate_forkjoin,
    simulate_single_queue,
    simulate_thinned,
)

logger = logging.getLogger(__name__)

THREADS_ENV = "FORKJOIN_THREADS"

CCDF_COLUMNS = ("tau", "empirical_survival", "ci_halfwidth", "bound_survival")
PLOTDATA_COLUMNS = ("scenario", "n", "k", "tau", "series", "value", "ci", "rho")
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"
PLOTDATA_FILE = "plotdata.csv"

FIGURE1_N_VALUES = (4, 64, 1024)
SCALING_N_VALUES = (64, 256, 1024, 4096)
K_EXPONENTS = (Fraction(1, 3), Fraction(1, 2), Fraction(2, 3), Fraction(9, 10))
DOMINANCE_PAIRS = ((64, 8), (256, 16), (8, 8), (16, 16))
COUPLING_PAIRS = ((16, 4),)
ASSOC_PAIRS = ((4, 2), (6, 2), (6, 3), (8, 4))
ASSOC_BETAS = ("0", "threshold")
THEOREM3_PAIRS = ((8, 4), (16, 8), (32, 16))

EMPIRICAL_F_JOBS = 1_250_000
COUPLING_CHUNK = 1_000
EXHAUSTIVE_P_LIMIT = 20
SINGLE_QUEUE_MEAN_TOLERANCE = 0.02
SINGLE_QUEUE_KS_LIMIT = 0.005
BUSY_MEAN_TOLERANCE = 0.05
TV_TOLERANCE = 0.005
VERDICT_WIDTHS = 3.0

# Regime checks for large systems: k <= ceil(n^(1/3)) must track the bound,
# k >= ceil(n^(9/10)) must fall clearly below it
REGIME_MIN_N = 1024
TIGHT_K_EXPONENT = Fraction(1, 3)
DIVERGENT_K_EXPONENT = Fraction(9, 10)
TIGHT_SUP_GAP = 0.02
DIVERGENT_MEAN_GAP = 0.05

COVARIANCE_FILE = "workload_covariance.csv"
COVARIANCE_COLUMNS = ("n", "k", "rho", "queue_i", "queue_j", "covariance", "ci_halfwidth")

# Stream purposes, kept apart in the stream index
PURPOSE_REPLICATION = 0
PURPOSE_TASK_CDF = 1
PURPOSE_THINNING = 2
PURPOSE_COVARIANCE = 3


class MissingOutputsError(FileNotFoundError):
    """Raised when plot data is requested but manifest files are absent."""

    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__("Missing result files: " + ", ".join(self.missing))


@dataclass
class ResultManifest:
    """
    Record of one scenario run

    Attributes:
        scenario (str): Scenario name
        config (dict): Resolved system configuration
        scenario_config (dict): Resolved scenario parameters
        seed (int): Master seed
        directory (str): Directory holding the data files
        outputs (dict): Data file name -> SHA-256 checksum
        series (list): CCDF files with their (n, k, rho) coordinates
        verdicts (dict): Acceptance verdicts by name
        jobs_simulated (int): Jobs (or arrivals) simulated in total
        wall_clock_seconds (float): Elapsed time of the run
        workers (int): Worker processes used
        version (str): Package version
    """

    scenario: str
    config: dict
    scenario_config: dict
    seed: int
    directory: str
    outputs: Dict[str, str] = field(default_factory=dict)
    series: List[dict] = field(default_factory=list)
    verdicts: Dict[str, bool] = field(default_factory=dict)
    jobs_simulated: int = 0
    wall_clock_seconds: float = 0.0
    workers: int = 1
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    @property
    def path(self) -> str:
        return os.path.join(self.directory, MANIFEST_FILE)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config": self.config,
            "scenario_config": self.scenario_config,
            "seed": self.seed,
            "directory": self.directory,
            "outputs": self.outputs,
            "series": self.series,
            "verdicts": self.verdicts,
            "jobs_simulated": self.jobs_simulated,
            "wall_clock_seconds": self.wall_clock_seconds,
            "workers": self.workers,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: dict, directory: Optional[str] = None) -> "ResultManifest":
        return cls(
            scenario=data["scenario"],
            config=data.get("config", {}),
            scenario_config=data.get("scenario_config", {}),
            seed=int(data.get("seed", 0)),
            directory=directory if directory is not None else data.get("directory", "."),
            outputs=dict(data.get("outputs", {})),
            series=list(data.get("series", [])),
            verdicts={k: bool(v) for k, v in data.get("verdicts", {}).items()},
            jobs_simulated=int(data.get("jobs_simulated", 0)),
            wall_clock_seconds=float(data.get("wall_clock_seconds", 0.0)),
            workers=int(data.get("workers", 1)),
            version=data.get("version", __version__),
        )


def load_manifest(path: str) -> ResultManifest:
    """
    Read a manifest written by run_scenario

    Data files are resolved next to the manifest, so result directories can
    be moved.
    """
    if not os.path.isfile(path):
        raise MissingOutputsError([path])
    return ResultManifest.from_dict(read_json(path), directory=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Workers and streams
# ---------------------------------------------------------------------------


def resolve_workers(threads: Optional[int] = None) -> int:
    """
    Worker count: explicit value, then FORKJOIN_THREADS, then the CPU count

    Raises:
        ValueError: If the chosen value is not a positive integer
    """
    if threads is not None:
        if threads < 1:
            raise ValueError(f"threads must be at least 1, got {threads}")
        return threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            value = 0
        if value < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return value
    return os.cpu_count() or 1


def parallel_map(func: Callable, items: Sequence, workers: int) -> list:
    """Order-preserving map over a process pool (in-process for one worker)."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))


def stream_id(config_index: int, replication: int, purpose: int = PURPOSE_REPLICATION) -> int:
    """Stream index of one replication of one configuration of a scenario."""
    return (config_index << 40) | (purpose << 32) | replication


def _forkjoin_task(args) -> np.ndarray:
    config, index = args
    return simulate_forkjoin(config, random_stream(config.seed, index)).job_delays


def _single_queue_task(args) -> np.ndarray:
    lambda_, service, jobs, warmup, seed, index = args
    return simulate_single_queue(lambda_, service, jobs, random_stream(seed, index), warmup)


def _coupling_task(args) -> List[tuple]:
    config, horizon, config_index, start, stop = args
    rows = []
    for r in range(start, stop):
        coupled = simulate_coupled(config, horizon, random_stream(config.seed, stream_id(config_index, r)))
        thinned = simulate_thinned(
            config, horizon, random_stream(config.seed, stream_id(config_index, r, PURPOSE_THINNING))
        )
        rows.append((
            r,
            coupled.diverged,
            coupled.first_divergence_time,
            coupled.killed_tasks,
            coupled.workloads_differ,
            coupled.jobs,
            thinned.diverged,
        ))
    return rows


def _busy_task(args):
    lambda_, service, samples, seed, index = args
    return busy_period_experiment(lambda_, service, samples, random_stream(seed, index))


def _snapshot_task(args) -> np.ndarray:
    config, interval, samples, index = args
    return sample_queue_lengths(config, interval, samples, 2, random_stream(config.seed, index))


def _workload_task(args) -> np.ndarray:
    config, interval, samples, index = args
    return sample_workloads(config, interval, samples, 2, random_stream(config.seed, index))


# ---------------------------------------------------------------------------
# Scenario plumbing
# ---------------------------------------------------------------------------


def _label(value) -> str:
    """File-name friendly rendering of a load, e.g. 2/3 -> 0p6667."""
    return format(float(value), ".4g").replace(".", "p")


def _dedupe(values: Sequence) -> list:
    seen = set()
    result = []
    for value in values:
        if value not in seen:
            seen.add(value)
            result.append(value)
    return result


def _rate_for_load(load: Fraction, service: ServiceDistribution):
    if isinstance(service, Exponential):
        return Fraction(load) * as_fraction(service.mu)
    return float(load) / service.mean


def sweep_pairs(
    scenario: Scenario,
    default_n_values: Optional[Sequence[int]] = None,
    default_pairs: Sequence[Tuple[int, int]] = (),
) -> List[Tuple[int, int]]:
    """
    (n, k) configurations of a scenario

    Explicit pairs win; otherwise n values are crossed with exponents
    through k = ceil(n^c); otherwise the scenario's default pairs apply.
    """
    if scenario.pairs:
        return _dedupe(scenario.pairs)
    if default_n_values is not None:
        n_values = scenario.n_values or default_n_values
        exponents = scenario.k_exponents or K_EXPONENTS
        return _dedupe((n, ceil_power(n, c)) for n in n_values for c in exponents)
    return _dedupe(default_pairs)


class _Run:
    """Mutable state of one scenario run, owned by the collecting process."""

    def __init__(self, scenario: Scenario, system: SystemConfig, workers: int, directory: str):
        self.scenario = scenario
        self.system = system
        self.workers = workers
        self.directory = directory
        self.outputs: List[str] = []
        self.series: List[dict] = []
        self.verdicts: Dict[str, bool] = {}
        self.jobs = 0

    def write_csv(self, name: str, header: Sequence[str], rows) -> None:
        write_csv(os.path.join(self.directory, name), header, rows)
        self.outputs.append(name)
        logger.debug("wrote %s", name)

    def verdict(self, name: str, passed: bool) -> None:
        self.verdicts[name] = bool(passed)
        if not passed:
            logger.warning("Verdict %s failed", name)

    def configs(self, pairs: Sequence[Tuple[int, int]]) -> List[SystemConfig]:
        """Cross pairs with the scenario loads (or the system's own rate)."""
        loads = self.scenario.loads or (None,)
        configs = []
        for n, k in pairs:
            for load in loads:
                rate = self.system.lambda_ if load is None else _rate_for_load(load, self.system.service)
                configs.append(self.system.with_updates(n=n, k=k, lambda_=rate))
        return configs


def task_delay_cdf(config: SystemConfig, config_index: int = 0) -> TaskDelayCdf:
    """Analytic M/M/1 F for exponential service, empirical F otherwise."""
    if isinstance(config.service, Exponential):
        return AnalyticMM1(float(config.lambda_), config.service.mu)
    stream = random_stream(config.seed, stream_id(config_index, 0, PURPOSE_TASK_CDF))
    samples = simulate_single_queue(
        float(config.lambda_), config.service, EMPIRICAL_F_JOBS, stream, config.warmup_fraction
    )
    return Empirical(samples)


def regime_checks(
    n: int, k: int, sup_gap: float, mean_delay: float, mean_halfwidth: float, mean_bound: float
) -> Dict[str, bool]:
    """
    Regime-specific checks of one delay point in a large system

    From n = 1024 on, k <= ceil(n^(1/3)) must keep the sup gap to the bound
    within 0.02 ("tight"), and k >= ceil(n^(9/10)) must put the mean delay
    at least 5% below the bound's mean with its 99% interval clear of it
    ("divergent"). Smaller systems get no checks.

    Returns:
        Mapping from check name to outcome
    """
    checks: Dict[str, bool] = {}
    if n < REGIME_MIN_N:
        return checks
    if k <= ceil_power(n, TIGHT_K_EXPONENT):
        checks["tight"] = sup_gap <= TIGHT_SUP_GAP
    if k >= ceil_power(n, DIVERGENT_K_EXPONENT):
        checks["divergent"] = (
            mean_bound - mean_delay >= DIVERGENT_MEAN_GAP * mean_bound
            and mean_delay + mean_halfwidth < mean_bound
        )
    return checks


def _measure_delays(run: _Run, config: SystemConfig, config_index: int, exponent=None) -> dict:
    n, k = config.n, config.k
    reps = run.scenario.replications
    started = time.perf_counter()
    delays = parallel_map(
        _forkjoin_task, [(config, stream_id(config_index, r)) for r in range(reps)], run.workers
    )
    run.jobs += reps * config.horizon_jobs

    F = task_delay_cdf(config, config_index)
    grid = ccdf_grid(F, k)
    ccdf = estimate_ccdf(delays, grid)

    def bound(tau):
        return independence_ccdf(F, k, tau)

    distance = sup_distance(ccdf, bound, widths=VERDICT_WIDTHS)
    mean = batch_means(np.concatenate(delays))
    mean_bound = bound_mean(F, k)

    name = f"{run.scenario.name}_n{n}_k{k}_rho{_label(config.rho)}.csv"
    run.write_csv(name, CCDF_COLUMNS, zip(grid, ccdf.survival, ccdf.ci_halfwidth, bound(grid)))
    run.series.append({"file": name, "n": n, "k": k, "rho": config.rho})
    run.verdict(f"dominated_n{n}_k{k}_rho{_label(config.rho)}", distance.dominated)
    for check, passed in regime_checks(n, k, distance.gap, mean.mean, mean.halfwidth, mean_bound).items():
        run.verdict(f"{check}_n{n}_k{k}_rho{_label(config.rho)}", passed)

    logger.info(
        "n=%d k=%d rho=%.4g: %d jobs in %.1fs, mean delay %.5g (bound %.5g), sup gap %.4g",
        n, k, config.rho, reps * config.horizon_jobs, time.perf_counter() - started,
        mean.mean, mean_bound, distance.gap,
    )
    result = {
        "file": name,
        "n": n,
        "k": k,
        "rho": config.rho,
        "lambda": float(config.lambda_),
        "Lambda": config.job_rate,
        "jobs": reps * (config.horizon_jobs - config.warmup_jobs),
        "task_cdf": F.describe(),
        "mean_delay": mean.mean,
        "mean_delay_halfwidth": mean.halfwidth,
        "bound_mean": mean_bound,
        "mean_gap_relative": (mean_bound - mean.mean) / mean_bound,
        "sup_gap": distance.gap,
        "sup_gap_tau": distance.gap_tau,
        "signed_excess": distance.signed_excess,
        "signed_excess_tau": distance.excess_tau,
        "dominated": distance.dominated,
    }
    if exponent is not None:
        result["k_exponent"] = str(exponent)
    if isinstance(config.service, Exponential):
        result["harmonic_mean"] = asymptotic_mean_mm1(k, float(config.lambda_), config.service.mu)
    return result


def snapshot_jobs(config: SystemConfig, snapshots: int, interval: float) -> int:
    """Expected jobs behind a snapshot run, warm-up snapshots included."""
    total = math.ceil(snapshots / (1.0 - config.warmup_fraction))
    return int(total * interval * config.job_rate)


def _workload_covariances(run: _Run, configs: Sequence[SystemConfig]) -> List[dict]:
    """Covariance of the first two workloads of each configuration."""
    scenario = run.scenario
    tasks = [
        (config, scenario.sample_interval, scenario.covariance_snapshots, stream_id(i, 0, PURPOSE_COVARIANCE))
        for i, config in enumerate(configs)
    ]
    snapshots = parallel_map(_workload_task, tasks, run.workers)
    run.jobs += sum(snapshot_jobs(c, scenario.covariance_snapshots, scenario.sample_interval) for c in configs)

    rows, results = [], []
    for config, data in zip(configs, snapshots):
        (estimate,) = workload_covariance(data, pairs=[(0, 1)])
        n, k = config.n, config.k
        rows.append((n, k, config.rho, 1, 2, estimate.estimate, estimate.halfwidth))
        results.append({
            "n": n,
            "k": k,
            "rho": config.rho,
            "covariance": estimate.estimate,
            "ci_halfwidth": estimate.halfwidth,
            "resolved": not estimate.contains_zero(),
        })
        # every job visits both queues when k = n
        if k == n:
            run.verdict(f"workload_covariance_positive_n{n}_k{k}_rho{_label(config.rho)}", estimate.estimate > 0)
        logger.info("n=%d k=%d: workload covariance %.4g +- %.3g", n, k, estimate.estimate, estimate.halfwidth)
    run.write_csv(COVARIANCE_FILE, COVARIANCE_COLUMNS, rows)
    return results


def _delay_sweep(run: _Run, pairs: Sequence[Tuple[int, int]]) -> List[dict]:
    return [_measure_delays(run, config, i) for i, config in enumerate(run.configs(pairs))]


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def _run_figure1(run: _Run) -> dict:
    pairs = sweep_pairs(run.scenario, default_n_values=FIGURE1_N_VALUES)
    return {"points": _delay_sweep(run, pairs)}


def _run_dominance(run: _Run) -> dict:
    pairs = sweep_pairs(run.scenario, default_pairs=DOMINANCE_PAIRS)
    points = _delay_sweep(run, pairs)
    return {"points": points, "workload_covariance": _workload_covariances(run, run.configs(pairs))}


def _run_scaling(run: _Run) -> dict:
    pairs = sweep_pairs(run.scenario, default_n_values=SCALING_N_VALUES)
    points = _delay_sweep(run, pairs)
    for point in points:
        n, k = point["n"], point["k"]
        tau = coupling_time_scale(n, k)
        point["coupling_tau"] = tau
        point["coupling_divergence"] = pe_exact(n, k, point["Lambda"], tau)
        point["thinning_divergence"] = pe_thinning_exact(n, k, point["lambda"], tau)
    return {"points": points}


def exhaustive_p_select_le1(n: int, k: int) -> Fraction:
    """Share of k-subsets of n servers hitting at most one of servers 0..k-1."""
    total = 0
    good = 0
    for subset in itertools.combinations(range(n), k):
        total += 1
        if sum(1 for q in subset if q < k) <= 1:
            good += 1
    return Fraction(good, total)


def _run_coupling(run: _Run) -> dict:
    scenario = run.scenario
    horizon = scenario.coupling_horizon
    runs = scenario.coupling_runs
    points = []
    for i, config in enumerate(run.configs(sweep_pairs(scenario, default_pairs=COUPLING_PAIRS))):
        n, k = config.n, config.k
        started = time.perf_counter()
        chunks = [
            (config, horizon, i, start, min(start + COUPLING_CHUNK, runs))
            for start in range(0, runs, COUPLING_CHUNK)
        ]
        rows = [row for part in parallel_map(_coupling_task, chunks, run.workers) for row in part]
        run.jobs += sum(row[5] for row in rows)

        diverged = np.array([row[1] for row in rows], dtype=float)
        differ = np.array([row[4] for row in rows], dtype=float)
        thinned = np.array([row[6] for row in rows], dtype=float)
        expected = pe_exact(n, k, config.job_rate, horizon)
        expected_thin = pe_thinning_exact(n, k, float(config.lambda_), horizon)
        se = math.sqrt(expected * (1.0 - expected) / runs)
        se_thin = math.sqrt(expected_thin * (1.0 - expected_thin) / runs)

        name = f"coupling_n{n}_k{k}_rho{_label(config.rho)}.csv"
        run.write_csv(
            name,
            ("run", "diverged", "first_divergence_time", "killed_tasks", "workloads_differ", "jobs", "thinning_diverged"),
            rows,
        )
        tag = f"n{n}_k{k}_rho{_label(config.rho)}"
        run.verdict(f"divergence_matches_closed_form_{tag}", abs(diverged.mean() - expected) <= VERDICT_WIDTHS * se)
        run.verdict(f"thinning_matches_closed_form_{tag}", abs(thinned.mean() - expected_thin) <= VERDICT_WIDTHS * max(se_thin, 1.0 / runs))
        run.verdict(f"difference_implies_divergence_{tag}", bool(np.all(differ <= diverged)))

        point = {
            "file": name,
            "n": n,
            "k": k,
            "rho": config.rho,
            "Lambda": config.job_rate,
            "horizon": horizon,
            "runs": runs,
            "divergence_frequency": float(diverged.mean()),
            "divergence_exact": expected,
            "standard_error": se,
            "workloads_differ_frequency": float(differ.mean()),
            "thinning_frequency": float(thinned.mean()),
            "thinning_exact": expected_thin,
            "p_select_le1": p_select_le1(n, k, CombinatorialContext.for_system(n, k)),
        }
        if n <= EXHAUSTIVE_P_LIMIT:
            exact = p_select_le1(n, k, CombinatorialContext(n, k, exact=True))
            run.verdict(f"p_select_le1_enumeration_n{n}_k{k}", exact == exhaustive_p_select_le1(n, k))
        logger.info(
            "coupling n=%d k=%d: %d runs in %.1fs, P(E) %.4f vs %.4f",
            n, k, runs, time.perf_counter() - started, point["divergence_frequency"], expected,
        )
        points.append(point)
    return {"points": points}


def _run_busy(run: _Run) -> dict:
    system = run.system
    service = system.service
    loads = run.scenario.loads or (None,)
    rates = [system.lambda_ if load is None else _rate_for_load(load, service) for load in loads]
    tasks = [
        (float(rate), service, run.scenario.busy_samples, system.seed, stream_id(i, 0))
        for i, rate in enumerate(rates)
    ]
    results = parallel_map(_busy_task, tasks, run.workers)
    points = []
    for rate, result in zip(rates, results):
        rate = float(rate)
        rho = rate * service.mean
        expected = busy_period_mean(rate, service)
        name = f"busy_rho{_label(rho)}.csv"
        run.write_csv(name, ("inspection_workload", "passage_time"), zip(result.inspection_workloads, result.passage_times))
        run.verdict(f"busy_mean_rho{_label(rho)}", abs(result.mean - expected) <= BUSY_MEAN_TOLERANCE * expected)
        logger.info("busy period rho=%.4g: mean %.5g vs %.5g", rho, result.mean, expected)
        points.append({
            "file": name,
            "lambda": rate,
            "rho": rho,
            "service": service.describe(),
            "samples": int(len(result.passage_times)),
            "mean": result.mean,
            "ci_halfwidth": result.ci_halfwidth,
            "expected": expected,
            "busy_fraction": float(np.mean(result.inspection_workloads > 0)),
        })
    return {"points": points}


def _run_assoc(run: _Run) -> dict:
    scenario = run.scenario
    lam = as_fraction(run.system.lambda_)
    betas = scenario.betas or ASSOC_BETAS
    rows = []
    points = []
    for n, k in sweep_pairs(scenario, default_pairs=ASSOC_PAIRS):
        Lambda = Fraction(n) * lam / k
        threshold = beta_threshold(n, k, Lambda)
        for token in betas:
            beta = threshold if token == "threshold" else Fraction(token) * Lambda
            dist = arrival_pattern_dist(n, k, Lambda, beta)
            verdict = check_association(
                dist,
                workers=run.workers if k >= 5 else 1,
                long_running=scenario.long_running,
            )
            covariances = covariance_check(dist)
            min_cov = min(covariances.values()) if covariances else Fraction(0)
            example = verdict.counterexample
            rows.append((
                n, k, token, beta, verdict.associated,
                example.f.describe() if example else None,
                example.g.describe() if example else None,
                example.gap if example else None,
                min_cov,
                verdict.pairs_checked,
            ))
            points.append({
                "n": n,
                "k": k,
                "beta_token": token,
                "Lambda": Lambda,
                "beta": beta,
                "beta_threshold": threshold,
                "associated": verdict.associated,
                "counterexample": None if example is None else {
                    "f": example.f.describe(),
                    "g": example.g.describe(),
                    "joint": example.joint,
                    "product": example.product,
                    "gap": example.gap,
                },
                "covariances": {f"{i + 1},{j + 1}": c for (i, j), c in covariances.items()},
                "pairs_checked": verdict.pairs_checked,
            })
            if token == "threshold":
                run.verdict(f"associated_at_threshold_n{n}_k{k}", verdict.associated)
            elif beta == 0 and 2 <= k < n:
                run.verdict(f"violated_without_oversampling_n{n}_k{k}", not verdict.associated)
            logger.info("assoc n=%d k=%d beta=%s: associated=%s", n, k, beta, verdict.associated)
    run.write_csv(
        "assoc_results.csv",
        ("n", "k", "beta_token", "beta", "associated", "f", "g", "gap", "min_covariance", "pairs_checked"),
        rows,
    )
    return {"points": points}


def _run_theorem3(run: _Run) -> dict:
    system = run.system
    if not isinstance(system.service, Exponential):
        raise ValueError(f"theorem3 needs exponential service, got {system.service.tag}")
    scenario = run.scenario
    configs = run.configs(sweep_pairs(scenario, default_pairs=THEOREM3_PAIRS))
    tasks = [
        (config, scenario.sample_interval, scenario.snapshots, stream_id(i, 0))
        for i, config in enumerate(configs)
    ]
    snapshots = parallel_map(_snapshot_task, tasks, run.workers)
    mu = as_fraction(system.service.mu)
    points = []
    for config, data in zip(configs, snapshots):
        n, k = config.n, config.k
        lam = as_fraction(config.lambda_)
        Lambda = Fraction(n) * lam / k
        joint = joint_pmf(data)
        tv = tv_distance(joint)
        residual = balance_residual_estimate(data, n, k, float(Lambda), float(mu))
        product = balance_residual(product_geometric_pmf(lam / mu), n, k, Lambda, mu)
        p = Fraction(k, n)
        tag = f"n{n}_k{k}"
        run.verdict(f"residual_vanishes_{tag}", abs(residual.mean) <= VERDICT_WIDTHS * residual.standard_error)
        run.verdict(f"product_residual_separated_{tag}", abs(float(product)) >= 10.0 * residual.standard_error)

        rho = lam / mu
        marg0, marg1 = joint.marginal(0), joint.marginal(1)
        name = f"theorem3_{tag}_pmf.csv"
        run.write_csv(
            name,
            ("q1", "q2", "probability", "product_of_marginals", "product_geometric"),
            [
                (i, j, float(joint.pmf[i, j]), float(marg0[i] * marg1[j]), float((1 - rho) ** 2 * rho ** (i + j)))
                for i in range(joint.q_max + 1)
                for j in range(joint.q_max + 1)
            ],
        )
        logger.info("theorem3 n=%d k=%d: residual %.3g (se %.3g), TV %.4g", n, k, residual.mean, residual.standard_error, tv.distance)
        points.append({
            "file": name,
            "n": n,
            "k": k,
            "snapshots": int(len(data)),
            "q_max": joint.q_max,
            "truncated_mass": joint.truncated_mass,
            "tv_distance": tv.distance,
            "tv_error_bound": tv.error_bound,
            "empirical_residual": residual.mean,
            "empirical_residual_se": residual.standard_error,
            "product_residual": product,
            "limiting_product_residual": limiting_product_residual(p, lam, mu),
            "epsilon": epsilon_theorem3(p, lam, mu),
        })
    run.jobs += sum(snapshot_jobs(c, scenario.snapshots, scenario.sample_interval) for c in configs)
    ordered = sorted(points, key=lambda point: point["n"])
    tvs = [point["tv_distance"] for point in ordered]
    run.verdict("tv_positive", all(tv > 0 for tv in tvs))
    run.verdict("tv_nondecreasing", all(b >= a - TV_TOLERANCE for a, b in zip(tvs, tvs[1:])))
    return {"points": points}


def _run_single_queue(run: _Run) -> dict:
    system = run.system
    service = system.service
    reps = run.scenario.replications
    points = []
    for i, config in enumerate(run.configs([(system.n, system.k)])):
        rate = float(config.lambda_)
        tasks = [
            (rate, service, system.horizon_jobs, system.warmup_fraction, system.seed, stream_id(i, r))
            for r in range(reps)
        ]
        samples = np.concatenate(parallel_map(_single_queue_task, tasks, run.workers))
        run.jobs += reps * system.horizon_jobs
        mean = batch_means(samples)
        expected = mg1_mean_sojourn(rate, service)
        tag = f"rho{_label(config.rho)}"
        run.verdict(f"mean_sojourn_{tag}", abs(mean.mean - expected) <= SINGLE_QUEUE_MEAN_TOLERANCE * expected)

        grid = np.quantile(samples, np.linspace(0.005, 0.995, 200))
        empirical = np.searchsorted(np.sort(samples), grid, side="right") / samples.size
        point = {
            "n": config.n,
            "lambda": rate,
            "rho": config.rho,
            "samples": int(samples.size),
            "mean_sojourn": mean.mean,
            "mean_sojourn_halfwidth": mean.halfwidth,
            "expected_mean_sojourn": expected,
        }
        if isinstance(service, Exponential):
            F = AnalyticMM1(rate, service.mu)
            reference = F.cdf(grid)
            ks = kolmogorov_distance(samples, F.cdf)
            point["kolmogorov_distance"] = ks
            run.verdict(f"kolmogorov_{tag}", ks <= SINGLE_QUEUE_KS_LIMIT)
        else:
            reference = np.full(grid.shape, np.nan)
        name = f"single_queue_{tag}.csv"
        run.write_csv(name, ("tau", "empirical_cdf", "reference_cdf"), zip(grid, empirical, reference))
        point["file"] = name
        logger.info("single queue rho=%.4g: mean sojourn %.5g vs %.5g", config.rho, mean.mean, expected)
        points.append(point)
    return {"points": points}


RUNNERS: Dict[str, Callable[[_Run], dict]] = {
    "figure1": _run_figure1,
    "dominance": _run_dominance,
    "coupling": _run_coupling,
    "busy": _run_busy,
    "assoc": _run_assoc,
    "theorem3": _run_theorem3,
    "scaling": _run_scaling,
    "single-queue": _run_single_queue,
}


def run_scenario(
    scenario: Scenario,
    system: Optional[SystemConfig] = None,
    workers: Optional[int] = None,
) -> ResultManifest:
    """
    Run one scenario and write its data files, summary and manifest

    Files land in `<output_dir>/<scenario name>/`. Every data file is a
    function of (system configuration, scenario, seed) only, whatever the
    worker count.

    Args:
        scenario: Scenario to run
        system: System configuration (scenario defaults when omitted)
        workers: Worker processes (FORKJOIN_THREADS or CPU count when omitted)

    Returns:
        The written ResultManifest
    """
    system = system or default_config(scenario.name)[0]
    workers = resolve_workers(workers)
    directory = os.path.join(scenario.output_dir, scenario.name)
    os.makedirs(directory, exist_ok=True)

    logger.info("Starting scenario %s (seed %d, %d workers)", scenario.name, system.seed, workers)
    started = time.perf_counter()
    run = _Run(scenario, system, workers, directory)
    results = RUNNERS[scenario.name](run)

    write_json(
        os.path.join(directory, SUMMARY_FILE),
        {
            "scenario": scenario.name,
            "config": system.describe(),
            "results": results,
            "verdicts": run.verdicts,
        },
    )
    run.outputs.append(SUMMARY_FILE)

    manifest = ResultManifest(
        scenario=scenario.name,
        config=system.describe(),
        scenario_config=scenario.describe(),
        seed=system.seed,
        directory=directory,
        outputs={name: sha256_file(os.path.join(directory, name)) for name in run.outputs},
        series=run.series,
        verdicts=run.verdicts,
        jobs_simulated=run.jobs,
        wall_clock_seconds=time.perf_counter() - started,
        workers=workers,
    )
    write_json(manifest.path, manifest.to_dict())
    logger.info(
        "Finished scenario %s in %.1fs: %d files, verdicts %s",
        scenario.name, manifest.wall_clock_seconds, len(manifest.outputs),
        "passed" if manifest.passed else "FAILED",
    )
    return manifest


def emit_plotdata(manifest: Union[ResultManifest, str], output_path: Optional[str] = None) -> str:
    """
    Reshape a manifest's CCDF files into one long-format CSV

    One row per (n, k, tau, series) with series "empirical" (ci is the
    half-width) or "bound" (ci is 0). A manifest without CCDF series gives a
    header-only file.

    Returns:
        Path of the written CSV

    Raises:
        MissingOutputsError: Listing every absent input file
    """
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    paths = [os.path.join(manifest.directory, entry["file"]) for entry in manifest.series]
    missing = [path for path in paths if not os.path.isfile(path)]
    if missing:
        raise MissingOutputsError(missing)

    rows = []
    for entry, path in zip(manifest.series, paths):
        for record in read_csv(path):
            tau = float(record["tau"])
            rows.append((manifest.scenario, entry["n"], entry["k"], tau, "empirical",
                         float(record["empirical_survival"]), float(record["ci_halfwidth"]), float(entry["rho"])))
            rows.append((manifest.scenario, entry["n"], entry["k"], tau, "bound",
                         float(record["bound_survival"]), 0.0, float(entry["rho"])))

    output_path = output_path or os.path.join(manifest.directory, PLOTDATA_FILE)
    write_csv(output_path, PLOTDATA_COLUMNS, rows)
    logger.info("wrote %d plot rows to %s", len(rows), output_path)
    return output_path
