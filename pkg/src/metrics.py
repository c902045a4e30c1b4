"""
Fork-Join Lab - Statistical Estimators

This module turns simulation output into the quantities the experiments
compare against closed forms.

Features:
- Batch-means confidence intervals for autocorrelated samples
- Empirical job-delay CCDF on a tau grid with pointwise half-widths
- Sup-distance and signed dominance margin against a bound curve
- Joint queue-length pmf with truncation accounting and TV distance to
  the product of its own marginals
- Exact balance-equation residual for the joint law of two queues
- Workload covariance estimates between queue pairs
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

DEFAULT_BATCHES = 30
DEFAULT_CONFIDENCE = 0.99
MIN_CCDF_SAMPLES = 1_000
MIN_COVARIANCE_SAMPLES = 10_000
TRUNCATION_LIMIT = 0.01


class InsufficientSamplesError(ValueError):
    """Raised when an estimator receives fewer samples than it needs."""


class TruncationError(ValueError):
    """Raised when too much snapshot mass falls outside the pmf box."""


def normal_quantile(confidence: float = DEFAULT_CONFIDENCE) -> float:
    """Two-sided normal critical value, 2.5758 at 99%."""
    return float(stats.norm.ppf(0.5 + confidence / 2.0))


class BatchEstimate(NamedTuple):
    """Mean of a sample with its batch-means standard error and CI half-width."""

    mean: float
    standard_error: float
    halfwidth: float


def batch_means(
    samples: np.ndarray,
    batches: int = DEFAULT_BATCHES,
    confidence: float = DEFAULT_CONFIDENCE,
) -> BatchEstimate:
    """
    Batch-means estimate of the mean of a correlated sequence

    The sequence is cut into `batches` contiguous batches; the spread of the
    batch means gives the standard error.

    Args:
        samples: One-dimensional sample sequence in time order
        batches: Number of batches (reduced to the sample count if larger)
        confidence: Two-sided confidence level of the half-width

    Returns:
        BatchEstimate(mean, standard_error, halfwidth)
    """
    values = np.asarray(samples, dtype=float)
    if values.size == 0:
        raise InsufficientSamplesError("batch means need at least one sample")
    mean = float(values.mean())
    count = min(batches, values.size)
    if count < 2:
        return BatchEstimate(mean, math.inf, math.inf)
    means = np.array([chunk.mean() for chunk in np.array_split(values, count)])
    se = float(means.std(ddof=1) / math.sqrt(count))
    return BatchEstimate(mean, se, normal_quantile(confidence) * se)


# ---------------------------------------------------------------------------
# Stationarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationarityCheck:
    """Second- versus fourth-quarter comparison of a run's job delays."""

    second_quarter_mean: float
    fourth_quarter_mean: float
    pooled_se: float
    passed: bool


def stationarity_check(
    job_delays: np.ndarray,
    horizon_jobs: int,
    warmup_jobs: int,
    batches: int = 10,
    tolerance: float = 3.0,
) -> Optional[StationarityCheck]:
    """
    Compare the mean delay of the second and fourth quarters of the horizon

    Quarters are taken over the whole horizon and clipped to the retained
    (post-warmup) jobs. Returns None when either quarter has too few
    retained jobs to form batches.
    """
    def quarter(lo: int, hi: int) -> np.ndarray:
        return job_delays[max(lo - warmup_jobs, 0): max(hi - warmup_jobs, 0)]

    q2 = quarter(horizon_jobs // 4, horizon_jobs // 2)
    q4 = quarter(3 * horizon_jobs // 4, horizon_jobs)
    if len(q2) < 2 * batches or len(q4) < 2 * batches:
        return None
    e2 = batch_means(q2, batches)
    e4 = batch_means(q4, batches)
    pooled = math.hypot(e2.standard_error, e4.standard_error)
    return StationarityCheck(
        second_quarter_mean=e2.mean,
        fourth_quarter_mean=e4.mean,
        pooled_se=pooled,
        passed=abs(e2.mean - e4.mean) <= tolerance * pooled,
    )


# ---------------------------------------------------------------------------
# CCDF estimation
# ---------------------------------------------------------------------------


@dataclass
class CcdfEstimate:
    """
    Empirical tail distribution of job delay on a tau grid

    Attributes:
        grid (np.ndarray): Sorted tau values
        survival (np.ndarray): Estimates of P(T > tau), nonincreasing
        ci_halfwidth (np.ndarray): Pointwise 99% batch-means half-widths
        sample_count (int): Number of delays behind the estimate
    """

    grid: np.ndarray
    survival: np.ndarray
    ci_halfwidth: np.ndarray
    sample_count: int


def _pooled(delays: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if isinstance(delays, np.ndarray):
        return delays.astype(float, copy=False).ravel()
    parts = [np.asarray(part, dtype=float).ravel() for part in delays]
    if not parts:
        return np.empty(0)
    return np.concatenate(parts)


def _survival(sorted_values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return 1.0 - np.searchsorted(sorted_values, grid, side="right") / sorted_values.size


def estimate_ccdf(
    delays: Union[np.ndarray, Sequence[np.ndarray]],
    grid: Sequence[float],
    batches: int = DEFAULT_BATCHES,
    confidence: float = DEFAULT_CONFIDENCE,
) -> CcdfEstimate:
    """
    Pointwise empirical survival function with batch-means half-widths

    Args:
        delays: Delays in time order, or per-replication arrays merged in
            replication order
        grid: Sorted evaluation points
        batches: Number of contiguous batches for the half-widths
        confidence: Two-sided confidence level

    Returns:
        CcdfEstimate on the given grid

    Raises:
        InsufficientSamplesError: With fewer than 1000 delays
    """
    values = _pooled(delays)
    if values.size < MIN_CCDF_SAMPLES:
        raise InsufficientSamplesError(
            f"CCDF estimation needs at least {MIN_CCDF_SAMPLES} samples, got {values.size}"
        )
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a nonempty one-dimensional sequence")
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted ascending")

    survival = _survival(np.sort(values), grid)
    per_batch = np.array(
        [_survival(np.sort(chunk), grid) for chunk in np.array_split(values, batches)]
    )
    se = per_batch.std(axis=0, ddof=1) / math.sqrt(batches)
    return CcdfEstimate(
        grid=grid,
        survival=survival,
        ci_halfwidth=normal_quantile(confidence) * se,
        sample_count=int(values.size),
    )


@dataclass(frozen=True)
class SupDistance:
    """
    Grid comparison of an empirical CCDF with a bound curve

    Attributes:
        gap (float): max |empirical - bound| over the grid
        gap_tau (float): Grid point attaining the gap
        signed_excess (float): max (empirical - bound); <= 0 under dominance
        excess_tau (float): Grid point attaining the signed excess
        dominated (bool): empirical <= bound + 3 half-widths everywhere
    """

    gap: float
    gap_tau: float
    signed_excess: float
    excess_tau: float
    dominated: bool


def sup_distance(
    ccdf: CcdfEstimate,
    bound: Callable[[np.ndarray], np.ndarray],
    widths: float = 3.0,
) -> SupDistance:
    """
    Largest CCDF gap to a bound over the grid

    Since both curves are survival functions the gap equals the CDF gap
    sup |P(T <= tau) - P(T^ <= tau)| restricted to the grid.

    Args:
        ccdf: Empirical estimate
        bound: Vectorised tau -> P(T^ > tau)
        widths: Half-width multiples allowed by the dominance verdict
    """
    if ccdf.grid.size == 0:
        raise ValueError("grid must be nonempty")
    reference = np.asarray(bound(ccdf.grid), dtype=float)
    difference = ccdf.survival - reference
    gap_index = int(np.argmax(np.abs(difference)))
    excess_index = int(np.argmax(difference))
    return SupDistance(
        gap=float(abs(difference[gap_index])),
        gap_tau=float(ccdf.grid[gap_index]),
        signed_excess=float(difference[excess_index]),
        excess_tau=float(ccdf.grid[excess_index]),
        dominated=bool(np.all(difference <= widths * ccdf.ci_halfwidth)),
    )


def kolmogorov_distance(samples: np.ndarray, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """Kolmogorov-Smirnov statistic between samples and a continuous CDF."""
    return float(stats.kstest(np.asarray(samples, dtype=float), cdf).statistic)


# ---------------------------------------------------------------------------
# Joint queue-length pmf and TV distance
# ---------------------------------------------------------------------------


@dataclass
class JointPmfEstimate:
    """
    Counts of m-dimensional queue-length snapshots inside {0..q_max}^m

    Attributes:
        m (int): Marginal width
        q_max (int): Truncation level per coordinate
        counts (np.ndarray): Integer counts, shape (q_max + 1,) * m
        truncated (int): Snapshots with some coordinate above q_max
    """

    m: int
    q_max: int
    counts: np.ndarray
    truncated: int

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.truncated

    @property
    def truncated_mass(self) -> float:
        return self.truncated / self.total if self.total else 0.0

    @property
    def pmf(self) -> np.ndarray:
        """Joint probabilities over the box, relative to all snapshots."""
        return self.counts / self.total

    def marginal(self, axis: int) -> np.ndarray:
        others = tuple(i for i in range(self.m) if i != axis)
        return self.pmf.sum(axis=others)

    def probability(self, state: Tuple[int, ...]) -> float:
        if any(q > self.q_max for q in state):
            raise KeyError(f"state {state} lies outside the truncation box q_max={self.q_max}")
        return float(self.pmf[state])

    def merge(self, other: "JointPmfEstimate") -> "JointPmfEstimate":
        """Commutative count addition of two estimates on the same box."""
        if (self.m, self.q_max) != (other.m, other.q_max):
            raise ValueError("can only merge estimates with the same m and q_max")
        return JointPmfEstimate(self.m, self.q_max, self.counts + other.counts, self.truncated + other.truncated)


def choose_q_max(snapshots: np.ndarray, tolerance: float = TRUNCATION_LIMIT) -> int:
    """
    Smallest level whose box leaves less than `tolerance` mass outside

    The outside mass is bounded through the marginals: the sum over
    coordinates of P(X_i > q).
    """
    data = np.asarray(snapshots)
    if data.ndim == 1:
        data = data[:, None]
    top = int(data.max()) if data.size else 0
    for level in range(top + 1):
        outside = float(np.sum(np.mean(data > level, axis=0)))
        if outside < tolerance:
            logger.debug("q_max=%d leaves at most %.4g mass outside", level, outside)
            return level
    return top


def joint_pmf(snapshots: np.ndarray, q_max: Optional[int] = None) -> JointPmfEstimate:
    """Count queue-length snapshots of shape (N, m) into a truncated box."""
    data = np.asarray(snapshots, dtype=np.int64)
    if data.ndim == 1:
        data = data[:, None]
    m = data.shape[1]
    level = choose_q_max(data) if q_max is None else int(q_max)
    inside = np.all(data <= level, axis=1)
    flat = np.ravel_multi_index(tuple(data[inside].T), (level + 1,) * m)
    counts = np.bincount(flat, minlength=(level + 1) ** m).reshape((level + 1,) * m)
    return JointPmfEstimate(m=m, q_max=level, counts=counts, truncated=int((~inside).sum()))


@dataclass(frozen=True)
class TvEstimate:
    """TV distance to the product of marginals plus its truncation error bound."""

    distance: float
    error_bound: float


def tv_distance(joint: JointPmfEstimate) -> TvEstimate:
    """
    Total-variation distance between a joint pmf and its product of marginals

    Computed as half the L1 distance over the truncation box; the mass
    outside the box is reported as an additive error bound.

    Raises:
        TruncationError: If 1% or more of the snapshots fall outside the box
    """
    if joint.truncated_mass >= TRUNCATION_LIMIT:
        raise TruncationError(
            f"{joint.truncated_mass:.2%} of snapshots exceed q_max={joint.q_max}; "
            "rebuild the estimate with a larger q_max"
        )
    if joint.truncated_mass > TRUNCATION_LIMIT / 2:
        logger.warning("TV truncation mass %.3g is close to the limit", joint.truncated_mass)
    pmf = joint.pmf
    product = np.ones_like(pmf)
    for axis in range(joint.m):
        shape = [1] * joint.m
        shape[axis] = joint.q_max + 1
        product = product * joint.marginal(axis).reshape(shape)
    distance = 0.5 * float(np.abs(pmf - product).sum())
    return TvEstimate(distance=min(distance, 1.0), error_bound=joint.truncated_mass)


# ---------------------------------------------------------------------------
# Balance equation of the first two queues
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BalanceProbabilities:
    """Probabilities that a job sends 0, 1 or 2 tasks to queues 1 and 2."""

    p0: Fraction
    p1: Fraction
    p2: Fraction

    def as_tuple(self) -> Tuple[Fraction, Fraction, Fraction]:
        return (self.p0, self.p1, self.p2)


def balance_probabilities(n: int, k: int) -> BalanceProbabilities:
    """
    Exact p0, p1, p2 for an (n, k) system

    p0 = C(n-2, k) / C(n, k), p1 = 2 C(n-2, k-1) / C(n, k),
    p2 = C(n-2, k-2) / C(n, k).
    """
    if n < 2 or not 2 <= k <= n:
        raise ValueError(f"balance probabilities need 2 <= k <= n, got n={n}, k={k}")
    total = math.comb(n, k)
    return BalanceProbabilities(
        p0=Fraction(math.comb(n - 2, k), total),
        p1=Fraction(2 * math.comb(n - 2, k - 1), total),
        p2=Fraction(math.comb(n - 2, k - 2), total),
    )


def limiting_balance_probabilities(p: Union[Fraction, float]) -> BalanceProbabilities:
    """Limits (1-p)^2, 2p(1-p), p^2 of the balance probabilities as n grows with k = pn."""
    return BalanceProbabilities(p0=(1 - p) ** 2, p1=2 * p * (1 - p), p2=p ** 2)


PmfSource = Union[JointPmfEstimate, Mapping[Tuple[int, int], object], Callable[[int, int], object]]

# coefficients of the balance equation at state (1, 1)
_OUTFLOW_STATE = (1, 1)
_INFLOW_STATES = ((0, 1), (1, 0), (0, 0), (1, 2), (2, 1))


def _lookup(pmf: PmfSource) -> Callable[[int, int], object]:
    if isinstance(pmf, JointPmfEstimate):
        if pmf.m != 2:
            raise ValueError(f"balance residual needs a two-queue pmf, got m={pmf.m}")
        if pmf.q_max < 2:
            raise ValueError("balance residual needs the pmf to cover lengths up to 2")
        return lambda i, j: pmf.probability((i, j))
    if isinstance(pmf, Mapping):
        return lambda i, j: pmf.get((i, j), 0)
    return pmf


def _residual_weights(
    probabilities: BalanceProbabilities, Lambda, mu
) -> Dict[Tuple[int, int], object]:
    p0, p1, p2 = probabilities.as_tuple()
    half = Fraction(1, 2)
    return {
        (1, 1): p1 * Lambda + p2 * Lambda + 2 * mu,
        (0, 1): -half * p1 * Lambda,
        (1, 0): -half * p1 * Lambda,
        (0, 0): -p2 * Lambda,
        (1, 2): -mu,
        (2, 1): -mu,
    }


def balance_residual(
    pmf: PmfSource,
    n: int,
    k: int,
    Lambda,
    mu,
    probabilities: Optional[BalanceProbabilities] = None,
):
    """
    Residual of the balance equation of state (1, 1) for two queues

    R = pi(1,1)(p1 Lambda + p2 Lambda + 2 mu)
        - [pi(0,1) p1 Lambda / 2 + pi(1,0) p1 Lambda / 2 + pi(0,0) p2 Lambda
           + pi(1,2) mu + pi(2,1) mu]

    The stationary law of the first two queues makes R vanish. With exact
    inputs (Fractions) the result is an exact Fraction.

    Args:
        pmf: JointPmfEstimate, mapping (i, j) -> probability, or callable
        n: Number of servers
        k: Tasks per job
        Lambda: Job arrival rate
        mu: Service rate
        probabilities: Override of (p0, p1, p2), e.g. their n -> infinity limits
    """
    probabilities = probabilities or balance_probabilities(n, k)
    lookup = _lookup(pmf)
    weights = _residual_weights(probabilities, Lambda, mu)
    terms = [weights[state] * lookup(*state) for state in (_OUTFLOW_STATE,) + _INFLOW_STATES]
    if all(isinstance(t, (int, Fraction)) for t in terms):
        return sum(terms, Fraction(0))
    return math.fsum(float(t) for t in terms)


def balance_residual_estimate(
    snapshots: np.ndarray,
    n: int,
    k: int,
    Lambda: float,
    mu: float,
    batches: int = DEFAULT_BATCHES,
) -> BatchEstimate:
    """
    Residual of the empirical two-queue law with a batch-means standard error

    The residual is linear in the pmf, so it is the time average of a
    per-snapshot score; batching that score gives the standard error.
    """
    data = np.asarray(snapshots, dtype=np.int64)
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError("balance residual needs snapshots of shape (N, 2)")
    weights = _residual_weights(balance_probabilities(n, k), Lambda, mu)
    score = np.zeros(len(data))
    for (i, j), weight in weights.items():
        score[(data[:, 0] == i) & (data[:, 1] == j)] = float(weight)
    return batch_means(score, batches)


def product_geometric_pmf(rho) -> Callable[[int, int], object]:
    """Stationary law (1-rho)^2 rho^(i+j) of two independent M/M/1 queue lengths."""
    return lambda i, j: (1 - rho) ** 2 * rho ** (i + j)


def limiting_product_residual(p, lambda_, mu):
    """Residual -p lambda (1-rho)^4 of the product law under the limiting probabilities."""
    rho = lambda_ / mu
    return -p * lambda_ * (1 - rho) ** 4


def epsilon_theorem3(p, lambda_, mu):
    """
    Separation constant between the two-queue law and the product law

    epsilon = p lambda (1-rho)^2 / (2 (11 Lambda + 8 mu)) with Lambda = lambda / p.
    Exact inputs give an exact Fraction.
    """
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if not lambda_ < mu:
        raise ValueError(f"need lambda < mu, got lambda={lambda_}, mu={mu}")
    rho = lambda_ / mu
    Lambda = lambda_ / p
    return p * lambda_ * (1 - rho) ** 2 / (2 * (11 * Lambda + 8 * mu))


# ---------------------------------------------------------------------------
# Workload covariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceEstimate:
    """Covariance of two queues' workloads with a 99% batch-means half-width."""

    pair: Tuple[int, int]
    estimate: float
    halfwidth: float

    def contains_zero(self) -> bool:
        return abs(self.estimate) <= self.halfwidth


def workload_covariance(
    snapshots: np.ndarray,
    pairs: Optional[Iterable[Tuple[int, int]]] = None,
    batches: int = DEFAULT_BATCHES,
    confidence: float = DEFAULT_CONFIDENCE,
) -> List[CovarianceEstimate]:
    """
    Batch-means covariance between selected columns of a snapshot matrix

    Args:
        snapshots: Array (N, m) of workload (or queue-length) snapshots
        pairs: Column pairs; all pairs i < j by default

    Raises:
        InsufficientSamplesError: With fewer than 10^4 snapshots
    """
    data = np.asarray(snapshots, dtype=float)
    if data.ndim != 2 or len(data) < MIN_COVARIANCE_SAMPLES:
        raise InsufficientSamplesError(
            f"workload covariance needs at least {MIN_COVARIANCE_SAMPLES} snapshots of shape (N, m)"
        )
    pairs = list(pairs) if pairs is not None else list(itertools.combinations(range(data.shape[1]), 2))
    z = normal_quantile(confidence)
    chunks = np.array_split(data, batches)
    estimates = []
    for i, j in pairs:
        overall = float(np.cov(data[:, i], data[:, j])[0, 1])
        per_batch = np.array([np.cov(c[:, i], c[:, j])[0, 1] for c in chunks])
        se = float(per_batch.std(ddof=1) / math.sqrt(batches))
        estimates.append(CovarianceEstimate(pair=(i, j), estimate=overall, halfwidth=z * se))
    return estimates
