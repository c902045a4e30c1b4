"""
Fork-Join Lab - Discrete-Event Simulator

This module simulates the n-queue limited fork-join system and the
auxiliary systems used to check the asymptotic-independence argument.

Features:
- Arrival-only event loop: FIFO servers are work-conserving, so each queue
  is represented by the absolute time at which it would empty and workloads
  decay at rate 1 without departure events
- Coupled system with the kill rule and bitwise coupling verification
- Thinning coupling between the coupled system and independent queues
- Single-queue M/G/1 runs through the vectorised Lindley recursion
- Busy-period (first passage to empty) experiments from stationarity
- Fixed-interval queue-length and workload snapshots
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .metrics import StationarityCheck, batch_means, stationarity_check
from .model import (
    Exponential,
    ServiceDistribution,
    SubsetSampler,
    SystemConfig,
    lambda_tilde,
    p_select_le1,
    require_stable,
)

logger = logging.getLogger(__name__)

# queue-length snapshots are at least this many mean service times apart
MIN_SNAPSHOT_SPACING = 2.0


class CouplingViolation(AssertionError):
    """The first k workloads of S and S~ differed before event E occurred."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class WorkloadState:
    """
    Workload vector of the n queues at one instant

    Attributes:
        now (float): Simulation time
        workloads (np.ndarray): Remaining work per queue, all >= 0
    """

    now: float
    workloads: np.ndarray

    @classmethod
    def from_finish_times(cls, now: float, finish: np.ndarray) -> "WorkloadState":
        """Decay the per-queue emptying times to workloads at `now`."""
        return cls(now=now, workloads=np.maximum(finish - now, 0.0))


@dataclass(frozen=True)
class JobRecord:
    """
    One completed job

    Attributes:
        arrival_time (float): Arrival epoch
        queues (tuple): The k distinct queue indices, ascending
        task_delays (tuple): Delay of each task, aligned with `queues`
        service_times (tuple): Service requirement of each task
        job_delay (float): Maximum task delay
    """

    arrival_time: float
    queues: Tuple[int, ...]
    task_delays: Tuple[float, ...]
    service_times: Tuple[float, ...]
    job_delay: float


@dataclass
class ForkJoinRun:
    """
    Post-warmup output of one fork-join replication

    Per-task arrays are only retained when the run was started with
    keep_tasks=True; job-level arrays are always present.
    """

    config: SystemConfig
    arrival_times: np.ndarray
    job_delays: np.ndarray
    final_state: WorkloadState
    stationarity: Optional[StationarityCheck] = None
    queues: Optional[np.ndarray] = None
    task_delays: Optional[np.ndarray] = None
    service_times: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.job_delays)

    def records(self) -> Iterator[JobRecord]:
        """Yield one JobRecord per retained job."""
        if self.queues is None:
            raise ValueError("Run was simulated without keep_tasks=True")
        for i in range(len(self.job_delays)):
            yield JobRecord(
                arrival_time=float(self.arrival_times[i]),
                queues=tuple(int(q) for q in self.queues[i]),
                task_delays=tuple(float(d) for d in self.task_delays[i]),
                service_times=tuple(float(s) for s in self.service_times[i]),
                job_delay=float(self.job_delays[i]),
            )


@dataclass(frozen=True)
class CouplingTrace:
    """
    Outcome of one coupled replication over [0, horizon]

    Attributes:
        horizon (float): Length of the observation window
        diverged (bool): Whether the divergence event occurred
        first_divergence_time (Optional[float]): Epoch of the first divergence
        killed_tasks (int): Tasks removed from (or thinned away in) the second system
        workloads_differ (bool): Whether the first k workloads differ at the horizon
        jobs (int): Arrivals processed in the window
    """

    horizon: float
    diverged: bool
    first_divergence_time: Optional[float]
    killed_tasks: int
    workloads_differ: bool
    jobs: int


@dataclass(frozen=True)
class BusyPeriodSample:
    """Workload seen at an inspection epoch and the time until the queue empties."""

    inspection_workload: float
    passage_time: float


@dataclass
class BusyPeriodResult:
    """
    Samples of a busy-period experiment

    Attributes:
        inspection_workloads (np.ndarray): Workload at each inspection epoch
        passage_times (np.ndarray): First passage to empty from each epoch
        mean (float): Sample mean of the passage times
        ci_halfwidth (float): 99% batch-means half-width of the mean
    """

    inspection_workloads: np.ndarray
    passage_times: np.ndarray
    mean: float
    ci_halfwidth: float

    def samples(self) -> Iterator[BusyPeriodSample]:
        for w, p in zip(self.inspection_workloads, self.passage_times):
            yield BusyPeriodSample(inspection_workload=float(w), passage_time=float(p))


# ---------------------------------------------------------------------------
# Fork-join system
# ---------------------------------------------------------------------------


def simulate_forkjoin(
    config: SystemConfig,
    stream: np.random.Generator,
    keep_tasks: bool = False,
) -> ForkJoinRun:
    """
    Simulate the limited fork-join system from empty queues

    Jobs arrive as a Poisson process of rate Lambda = n lambda / k. Each job
    picks k distinct queues uniformly; the task at queue i waits for the
    workload of i and then its own service time, after which the workload of
    i has grown by that service time. The first warmup_jobs jobs shape the
    state but are not recorded.

    Args:
        config: Validated system configuration
        stream: Random stream owned by this replication
        keep_tasks: Retain per-task queues, delays and service times

    Returns:
        ForkJoinRun with post-warmup job delays and the final workload state
    """
    n, k = config.n, config.k
    total = config.horizon_jobs
    warm = config.warmup_jobs
    kept = total - warm
    mean_gap = 1.0 / config.job_rate

    sampler = SubsetSampler(n, k)
    finish = np.zeros(n)
    arrival_times = np.empty(kept)
    job_delays = np.empty(kept)
    if keep_tasks:
        queues_out = np.empty((kept, k), dtype=np.int64)
        delays_out = np.empty((kept, k))
        services_out = np.empty((kept, k))

    clock = 0.0
    done = 0
    while done < total:
        size = min(sampler.rows, total - done)
        gaps = stream.exponential(mean_gap, size)
        subsets = sampler.draw(stream.random((size, k)))
        services = config.service.sample(stream, (size, k))
        times = clock + np.cumsum(gaps)

        for i in range(size):
            now = times[i]
            queues = subsets[i]
            waits = np.maximum(finish[queues] - now, 0.0)
            delays = waits + services[i]
            finish[queues] = now + delays

            slot = done + i - warm
            if slot >= 0:
                arrival_times[slot] = now
                job_delays[slot] = delays.max()
                if keep_tasks:
                    queues_out[slot] = queues
                    delays_out[slot] = delays
                    services_out[slot] = services[i]

        clock = float(times[-1])
        done += size
        logger.debug("fork-join n=%d k=%d: %d/%d jobs", n, k, done, total)

    run = ForkJoinRun(
        config=config,
        arrival_times=arrival_times,
        job_delays=job_delays,
        final_state=WorkloadState.from_finish_times(clock, finish),
    )
    if keep_tasks:
        run.queues = queues_out
        run.task_delays = delays_out
        run.service_times = services_out

    run.stationarity = stationarity_check(job_delays, total, warm)
    if run.stationarity is not None and not run.stationarity.passed:
        logger.warning(
            "Stationarity check failed for n=%d k=%d: quarter means %.6g vs %.6g "
            "(pooled SE %.3g); consider a longer horizon",
            n, k, run.stationarity.second_quarter_mean,
            run.stationarity.fourth_quarter_mean, run.stationarity.pooled_se,
        )
    return run


# ---------------------------------------------------------------------------
# Single M/G/1 queue
# ---------------------------------------------------------------------------


def _lindley_waits(gaps: np.ndarray, services: np.ndarray) -> np.ndarray:
    """
    FIFO waiting times of consecutive customers, first customer finds it empty

    W_i = X_i - min_{j <= i} X_j with X_i = sum_{j=1..i} (S_{j-1} - A_j).
    """
    increments = services[:-1] - gaps[1:]
    path = np.concatenate(([0.0], np.cumsum(increments)))
    return path - np.minimum.accumulate(path)


def simulate_single_queue(
    lambda_: float,
    service: ServiceDistribution,
    num_jobs: int,
    stream: np.random.Generator,
    warmup_fraction: float = SystemConfig.DEFAULT_WARMUP_FRACTION,
) -> np.ndarray:
    """
    Sojourn times of one isolated M/G/1 queue

    Args:
        lambda_: Arrival rate
        service: Service-time law
        num_jobs: Total customers simulated, warmup included
        stream: Random stream
        warmup_fraction: Leading share of customers discarded

    Returns:
        Post-warmup sojourn-time samples in arrival order
    """
    require_stable(lambda_, service)
    if not lambda_ > 0:
        raise ValueError(f"lambda must be positive, got {lambda_}")
    if num_jobs < 2:
        raise ValueError(f"num_jobs must be at least 2, got {num_jobs}")
    gaps = stream.exponential(1.0 / lambda_, num_jobs)
    services = service.sample(stream, num_jobs)
    sojourn = _lindley_waits(gaps, services) + services
    return sojourn[int(math.floor(warmup_fraction * num_jobs)):]


# ---------------------------------------------------------------------------
# Coupled systems
# ---------------------------------------------------------------------------


def simulate_coupled(
    config: SystemConfig,
    horizon: float,
    stream: np.random.Generator,
) -> CouplingTrace:
    """
    Run S and the coupled system S~ side by side over [0, horizon]

    Both systems start empty and share arrivals and service times. A job
    that selects m >= 2 of the queues 1..k keeps, in S~, one task at a
    uniformly chosen queue among those m and kills the other m - 1. Queues
    outside 1..k receive identical tasks in both systems and are not
    tracked. Until the first such job the first k workloads are checked to
    be bitwise equal.

    Per job the stream yields: the inter-arrival gap, k subset uniforms, k
    service times in queue-index order, and one uniform for the kept task.

    Raises:
        CouplingViolation: If the workloads differ before divergence
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    n, k = config.n, config.k
    mean_gap = 1.0 / config.job_rate
    sampler = SubsetSampler(n, k, rows=1)

    finish_s = np.zeros(k)
    finish_t = np.zeros(k)
    diverged = False
    first_divergence: Optional[float] = None
    killed = 0
    jobs = 0
    now = 0.0

    while True:
        now += stream.exponential(mean_gap)
        if now > horizon:
            break
        subset = sampler.draw(stream.random((1, k)))[0]
        services = config.service.sample(stream, k)
        pick = stream.random()
        jobs += 1

        inside = subset < k
        queues = subset[inside]
        work = services[inside]
        m = len(queues)
        if m == 0:
            continue

        delays = np.maximum(finish_s[queues] - now, 0.0) + work
        finish_s[queues] = now + delays
        if m == 1:
            delays_t = np.maximum(finish_t[queues] - now, 0.0) + work
            finish_t[queues] = now + delays_t
        else:
            keep = min(int(pick * m), m - 1)
            q = queues[keep]
            finish_t[q] = now + max(finish_t[q] - now, 0.0) + work[keep]
            killed += m - 1
            if not diverged:
                diverged = True
                first_divergence = now

        if not diverged and not np.array_equal(finish_s, finish_t):
            raise CouplingViolation(f"first-k workloads differ at t={now} before divergence")

    workloads_s = np.maximum(finish_s - horizon, 0.0)
    workloads_t = np.maximum(finish_t - horizon, 0.0)
    return CouplingTrace(
        horizon=horizon,
        diverged=diverged,
        first_divergence_time=first_divergence,
        killed_tasks=killed,
        workloads_differ=not np.array_equal(workloads_s, workloads_t),
        jobs=jobs,
    )


def simulate_thinned(
    config: SystemConfig,
    horizon: float,
    stream: np.random.Generator,
) -> CouplingTrace:
    """
    Couple k independent rate-lambda queues with the first k queues of S~

    Task arrivals to the independent queues form a Poisson process of rate
    k lambda with uniformly chosen targets. Each arrival also reaches the
    same queue of S~ with probability lambda~ / lambda, carrying the same
    service time. The run diverges when an arrival is thinned away.

    Per arrival the stream yields: the gap, the target uniform, the thinning
    uniform and one service time.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    k = config.k
    lam = float(config.lambda_)
    keep_probability = float(lambda_tilde(config.n, k, lam)) / lam
    mean_gap = 1.0 / (k * lam)

    finish_hat = np.zeros(k)
    finish_t = np.zeros(k)
    diverged = False
    first_divergence: Optional[float] = None
    thinned = 0
    arrivals = 0
    now = 0.0

    while True:
        now += stream.exponential(mean_gap)
        if now > horizon:
            break
        q = min(int(stream.random() * k), k - 1)
        accepted = stream.random() < keep_probability
        work = float(config.service.sample(stream, 1)[0])
        arrivals += 1

        finish_hat[q] = now + max(finish_hat[q] - now, 0.0) + work
        if accepted:
            finish_t[q] = now + max(finish_t[q] - now, 0.0) + work
        else:
            thinned += 1
            if not diverged:
                diverged = True
                first_divergence = now

        if not diverged and not np.array_equal(finish_hat, finish_t):
            raise CouplingViolation(f"thinned workloads differ at t={now} before divergence")

    return CouplingTrace(
        horizon=horizon,
        diverged=diverged,
        first_divergence_time=first_divergence,
        killed_tasks=thinned,
        workloads_differ=not np.array_equal(
            np.maximum(finish_hat - horizon, 0.0), np.maximum(finish_t - horizon, 0.0)
        ),
        jobs=arrivals,
    )


def pe_exact(n: int, k: int, Lambda: float, tau: float) -> float:
    """
    Probability that some job in [0, tau] selects two or more of queues 1..k

    P(E) = 1 - exp(-Lambda tau (1 - p)) with p = p_select_le1(n, k).
    """
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    miss = 1.0 - float(p_select_le1(n, k))
    return float(-math.expm1(-Lambda * tau * miss))


def pe_thinning_exact(n: int, k: int, lambda_: float, tau: float) -> float:
    """Probability that the thinning coupling diverges by tau: 1 - exp(-k tau (lambda - lambda~))."""
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    gap = float(lambda_) - float(lambda_tilde(n, k, float(lambda_)))
    return float(-math.expm1(-k * tau * gap))


def pe_thinning_union_bound(n: int, k: int, lambda_: float, tau: float) -> float:
    """Union bound k tau (lambda - lambda~) on the thinning divergence probability."""
    return k * tau * (float(lambda_) - float(lambda_tilde(n, k, float(lambda_))))


def coupling_time_scale(n: int, k: int) -> float:
    """Time scale n^(1/2) / k on which both couplings stay together."""
    return math.sqrt(n) / k


# ---------------------------------------------------------------------------
# Busy periods
# ---------------------------------------------------------------------------


def busy_period_experiment(
    lambda_: float,
    service: ServiceDistribution,
    num_samples: int,
    stream: np.random.Generator,
    spacing: Optional[float] = None,
    warmup_time: Optional[float] = None,
) -> BusyPeriodResult:
    """
    Measure the first passage to empty from stationary workload snapshots

    One long M/G/1 path is simulated. After a warmup of `warmup_time` the
    workload is inspected at deterministic epochs `spacing` apart; each
    sample records the workload seen and the time, with arrivals continuing,
    until the queue first empties. An idle inspection gives passage 0.

    Args:
        lambda_: Arrival rate
        service: Service-time law
        num_samples: Number of inspection epochs
        stream: Random stream
        spacing: Distance between epochs (default 10 E[S] / (1 - rho))
        warmup_time: Time before the first epoch (default 20 spacings)

    Returns:
        BusyPeriodResult with per-sample arrays and the mean estimate
    """
    rho = require_stable(lambda_, service)
    if not lambda_ > 0:
        raise ValueError(f"lambda must be positive, got {lambda_}")
    if num_samples < 1:
        raise ValueError(f"num_samples must be positive, got {num_samples}")
    spacing = spacing if spacing is not None else max(10.0 * service.mean / (1.0 - rho), 2.0 * service.mean)
    warmup_time = warmup_time if warmup_time is not None else 20.0 * spacing
    epochs = warmup_time + spacing * np.arange(num_samples)
    last_epoch = float(epochs[-1])

    chunk = int(lambda_ * (last_epoch + spacing)) + 1024
    gaps = stream.exponential(1.0 / lambda_, chunk)
    services = service.sample(stream, chunk)
    while True:
        arrivals = np.cumsum(gaps)
        waits = _lindley_waits(gaps, services)
        departures = arrivals + waits + services
        # customer i closes a busy period when customer i + 1 finds the queue empty
        ends = np.flatnonzero(waits[1:] == 0.0)
        last_seen = int(np.searchsorted(arrivals, last_epoch, side="right")) - 1
        if arrivals[-1] > last_epoch and len(ends) and ends[-1] >= last_seen:
            break
        more = max(1024, chunk // 4)
        gaps = np.concatenate((gaps, stream.exponential(1.0 / lambda_, more)))
        services = np.concatenate((services, service.sample(stream, more)))

    last_arrival = np.searchsorted(arrivals, epochs, side="right") - 1
    seen = np.where(last_arrival >= 0, departures[np.maximum(last_arrival, 0)], 0.0)
    workloads = np.maximum(seen - epochs, 0.0)
    busy = workloads > 0.0
    closing = ends[np.minimum(np.searchsorted(ends, np.maximum(last_arrival, 0)), len(ends) - 1)]
    passage = np.where(busy, departures[closing] - epochs, 0.0)

    estimate = batch_means(passage)
    logger.debug("busy-period experiment: %d samples, mean %.6g", num_samples, estimate.mean)
    return BusyPeriodResult(
        inspection_workloads=workloads,
        passage_times=passage,
        mean=estimate.mean,
        ci_halfwidth=estimate.halfwidth,
    )


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def _snapshot_run(
    config: SystemConfig,
    sample_interval: float,
    num_samples: int,
    m: int,
    stream: np.random.Generator,
    lengths: bool,
) -> np.ndarray:
    if not sample_interval > 0:
        raise ValueError(f"sample_interval must be positive, got {sample_interval}")
    if num_samples < 1:
        raise ValueError(f"num_samples must be positive, got {num_samples}")
    if not 1 <= m <= config.k:
        raise ValueError(f"marginal width m must satisfy 1 <= m <= k={config.k}, got {m}")

    n, k = config.n, config.k
    total = int(math.ceil(num_samples / (1.0 - config.warmup_fraction)))
    skip = total - num_samples
    out = np.empty((num_samples, m), dtype=np.int64 if lengths else float)

    sampler = SubsetSampler(n, k)
    mean_gap = 1.0 / config.job_rate
    finish = [0.0] * m
    pending: List[deque] = [deque() for _ in range(m)]
    taken = 0
    next_snapshot = sample_interval
    clock = 0.0

    while taken < total:
        size = sampler.rows
        gaps = stream.exponential(mean_gap, size)
        subsets = sampler.draw(stream.random((size, k))).tolist()
        services = config.service.sample(stream, (size, k)).tolist()
        times = (clock + np.cumsum(gaps)).tolist()

        for now, queues, work in zip(times, subsets, services):
            while taken < total and next_snapshot < now:
                if taken >= skip:
                    row = out[taken - skip]
                    for q in range(m):
                        if lengths:
                            line = pending[q]
                            while line and line[0] <= next_snapshot:
                                line.popleft()
                            row[q] = len(line)
                        else:
                            row[q] = max(finish[q] - next_snapshot, 0.0)
                taken += 1
                next_snapshot = (taken + 1) * sample_interval
            if taken >= total:
                break
            for q, s in zip(queues, work):
                if q >= m:
                    # subsets are sorted, nothing further falls in the window
                    break
                finish[q] = max(finish[q], now) + s
                if lengths:
                    pending[q].append(finish[q])
        clock = times[-1]
    return out


def sample_queue_lengths(
    config: SystemConfig,
    sample_interval: float,
    num_samples: int,
    m: int,
    stream: np.random.Generator,
) -> np.ndarray:
    """
    Fixed-interval snapshots of the first m queue lengths

    Snapshots are taken at multiples of sample_interval; the leading
    warmup_fraction of them is discarded. Only exponential service is
    accepted, since the estimators built on these counts treat queue length
    as the full state. Consecutive snapshots must be at least 2/mu apart.

    Returns:
        Integer array of shape (num_samples, m)

    Raises:
        ValueError: For non-exponential service, m outside 1..k, or an
            interval shorter than 2/mu
    """
    if not isinstance(config.service, Exponential):
        raise ValueError(
            "Queue-length snapshots require exponential service; got "
            f"{config.service.tag}. Use sample_workloads for general service laws."
        )
    spacing = MIN_SNAPSHOT_SPACING * config.service.mean
    if sample_interval < spacing:
        raise ValueError(
            f"sample_interval must be at least 2/mu = {spacing:g} to keep snapshots "
            f"apart, got {sample_interval:g}"
        )
    return _snapshot_run(config, sample_interval, num_samples, m, stream, lengths=True)


def sample_workloads(
    config: SystemConfig,
    sample_interval: float,
    num_samples: int,
    m: int,
    stream: np.random.Generator,
) -> np.ndarray:
    """Fixed-interval snapshots of the first m workloads, any service law."""
    return _snapshot_run(config, sample_interval, num_samples, m, stream, lengths=False)
