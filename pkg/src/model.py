"""
Fork-Join Lab - Model Core

This module provides the domain types shared by every other module of the
laboratory: the system configuration, the service-time laws, the exact and
log-space combinatorics of uniformly chosen server subsets, and the
deterministic random-stream contract.

Features:
- Immutable, validated system configuration with stability checking
- Exponential, deterministic, hyperexponential and truncated Pareto service
- Exact rational binomials (small n) and log-gamma binomials (large n)
- Reproducible per-replication random streams built on numpy SeedSequence
- Partial Fisher-Yates subset sampling, vectorised across jobs
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import ClassVar, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Number = Union[int, float, Fraction]


class UnstableSystemError(ValueError):
    """Raised when a queue would be loaded at rho >= 1."""

    def __init__(self, rho: float):
        self.rho = rho
        super().__init__(
            f"System is unstable: rho = {rho:.6g} (need rho < 1 for a "
            f"stationary regime)"
        )


# ---------------------------------------------------------------------------
# Service-time distributions
# ---------------------------------------------------------------------------


class ServiceDistribution:
    """
    Base class for the service-time law G

    Every variant is an immutable dataclass exposing its tag, its mean 1/mu
    and its second moment g2, and draws samples from a numpy Generator.

    Attributes:
        tag (str): Variant name used in configuration files and manifests
    """

    tag: ClassVar[str] = "abstract"

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def second_moment(self) -> float:
        raise NotImplementedError

    @property
    def rate(self) -> float:
        """Service rate mu = 1 / mean."""
        return 1.0 / self.mean

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        """Return a JSON-ready description of the distribution."""
        raise NotImplementedError

    def _check_moments(self) -> None:
        if not self.mean > 0:
            raise ValueError(f"Service mean must be positive, got {self.mean}")
        # Jensen, with a relative slack for rounding in the closed forms
        if self.second_moment < self.mean ** 2 * (1.0 - 1e-12):
            raise ValueError("Service second moment must be at least mean squared")


@dataclass(frozen=True)
class Exponential(ServiceDistribution):
    """Exponential service with rate mu."""

    mu: float = 1.0
    tag: ClassVar[str] = "exponential"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"Exponential rate must be positive, got {self.mu}")

    @property
    def mean(self) -> float:
        return 1.0 / self.mu

    @property
    def second_moment(self) -> float:
        return 2.0 / self.mu ** 2

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.exponential(1.0 / self.mu, size)

    def describe(self) -> dict:
        return {"distribution": self.tag, "mu": self.mu}


@dataclass(frozen=True)
class Deterministic(ServiceDistribution):
    """Constant service time d; draws consume no randomness."""

    value: float = 1.0
    tag: ClassVar[str] = "deterministic"

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"Deterministic service time must be positive, got {self.value}")

    @property
    def mean(self) -> float:
        return self.value

    @property
    def second_moment(self) -> float:
        return self.value ** 2

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return np.full(size, self.value, dtype=float)

    def describe(self) -> dict:
        return {"distribution": self.tag, "value": self.value}


@dataclass(frozen=True)
class HyperExponential(ServiceDistribution):
    """
    Mixture of exponentials

    Attributes:
        weights (tuple): Branch probabilities, positive and summing to 1
        rates (tuple): Branch rates, positive
    """

    weights: Tuple[float, ...] = (0.5, 0.5)
    rates: Tuple[float, ...] = (1.0, 1.0)
    tag: ClassVar[str] = "hyperexponential"

    WEIGHT_TOLERANCE: ClassVar[float] = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.weights) == 0 or len(self.weights) != len(self.rates):
            raise ValueError("Hyperexponential needs one rate per weight")
        if any(w <= 0 for w in self.weights) or any(r <= 0 for r in self.rates):
            raise ValueError("Hyperexponential weights and rates must all be positive")
        total = math.fsum(self.weights)
        if abs(total - 1.0) > self.WEIGHT_TOLERANCE:
            raise ValueError(f"Hyperexponential weights must sum to 1, got {total:.12g}")
        self._check_moments()

    @classmethod
    def balanced(cls, mean: float = 1.0, scv: float = 4.0) -> "HyperExponential":
        """
        Two-branch hyperexponential with balanced means

        Args:
            mean: Target mean service time
            scv: Squared coefficient of variation (must exceed 1)

        Returns:
            HyperExponential with the requested first two moments
        """
        if not scv > 1.0:
            raise ValueError(f"Hyperexponential needs scv > 1, got {scv}")
        p1 = 0.5 * (1.0 + math.sqrt((scv - 1.0) / (scv + 1.0)))
        p2 = 1.0 - p1
        return cls(weights=(p1, p2), rates=(2.0 * p1 / mean, 2.0 * p2 / mean))

    @property
    def mean(self) -> float:
        return math.fsum(w / r for w, r in zip(self.weights, self.rates))

    @property
    def second_moment(self) -> float:
        return math.fsum(2.0 * w / r ** 2 for w, r in zip(self.weights, self.rates))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        cumulative = np.cumsum(self.weights)
        cumulative[-1] = 1.0
        branch = np.searchsorted(cumulative, rng.random(size), side="right")
        rates = np.asarray(self.rates)[branch]
        return rng.exponential(1.0, size) / rates

    def describe(self) -> dict:
        return {
            "distribution": self.tag,
            "weights": list(self.weights),
            "rates": list(self.rates),
        }


@dataclass(frozen=True)
class TruncatedPareto(ServiceDistribution):
    """
    Pareto law with shape alpha truncated to [xmin, xmax]

    Sampling inverts the truncated CDF
    F(x) = (1 - (xmin/x)^alpha) / (1 - (xmin/xmax)^alpha).
    """

    alpha: float = 1.5
    xmin: float = 1.0
    xmax: float = 100.0
    tag: ClassVar[str] = "truncated_pareto"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"Pareto shape must be positive, got {self.alpha}")
        if not 0 < self.xmin < self.xmax:
            raise ValueError(
                f"Pareto bounds need 0 < xmin < xmax, got xmin={self.xmin}, xmax={self.xmax}"
            )
        self._check_moments()

    @classmethod
    def with_mean(cls, mean: float = 1.0, alpha: float = 1.5, ratio: float = 100.0) -> "TruncatedPareto":
        """Scale a truncated Pareto with xmax = ratio * xmin to the given mean."""
        unit = cls(alpha=alpha, xmin=1.0, xmax=ratio)
        scale = mean / unit.mean
        return cls(alpha=alpha, xmin=scale, xmax=ratio * scale)

    def _raw_moment(self, order: int) -> float:
        a, lo, hi = self.alpha, self.xmin, self.xmax
        mass = 1.0 - (lo / hi) ** a
        if math.isclose(order, a):
            integral = math.log(hi / lo)
        else:
            integral = (hi ** (order - a) - lo ** (order - a)) / (order - a)
        return a * lo ** a * integral / mass

    @property
    def mean(self) -> float:
        return self._raw_moment(1)

    @property
    def second_moment(self) -> float:
        return self._raw_moment(2)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        mass = 1.0 - (self.xmin / self.xmax) ** self.alpha
        u = rng.random(size)
        return self.xmin * (1.0 - u * mass) ** (-1.0 / self.alpha)

    def describe(self) -> dict:
        return {
            "distribution": self.tag,
            "alpha": self.alpha,
            "xmin": self.xmin,
            "xmax": self.xmax,
        }


# ---------------------------------------------------------------------------
# System configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemConfig:
    """
    Full parameterisation of one n-server limited fork-join system

    Attributes:
        n (int): Number of servers
        k (int): Tasks per job, 1 <= k <= n
        lambda_ (Number): Task arrival rate to each individual queue (exact by default)
        service (ServiceDistribution): Service-time law G
        seed (int): 64-bit master seed
        warmup_fraction (float): Share of the horizon discarded as warmup
        horizon_jobs (int): Total number of jobs simulated
    """

    DEFAULT_LAMBDA: ClassVar[Fraction] = Fraction(2, 3)
    DEFAULT_WARMUP_FRACTION: ClassVar[float] = 0.2
    DEFAULT_HORIZON_JOBS: ClassVar[int] = 125_000
    MAX_SEED: ClassVar[int] = 2 ** 64 - 1

    n: int
    k: int
    lambda_: Number = DEFAULT_LAMBDA
    service: ServiceDistribution = field(default_factory=Exponential)
    seed: int = 1
    warmup_fraction: float = 0.2
    horizon_jobs: int = 125_000

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not isinstance(self.k, int) or not 1 <= self.k <= self.n:
            raise ValueError(f"k must satisfy 1 <= k <= n (n={self.n}), got {self.k!r}")
        if not self.lambda_ > 0:
            raise ValueError(f"lambda must be positive, got {self.lambda_}")
        if not 0 <= self.seed <= self.MAX_SEED:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if not isinstance(self.horizon_jobs, int) or self.horizon_jobs < 1:
            raise ValueError(f"horizon_jobs must be a positive integer, got {self.horizon_jobs!r}")
        if self.rho >= 1.0:
            raise UnstableSystemError(self.rho)

    @property
    def rho(self) -> float:
        """Load of each individual queue, lambda * E[service]."""
        return float(self.lambda_) * self.service.mean

    @property
    def job_rate(self) -> float:
        """Job arrival rate Lambda = n * lambda / k."""
        return self.n * float(self.lambda_) / self.k

    @property
    def warmup_jobs(self) -> int:
        return int(math.floor(self.warmup_fraction * self.horizon_jobs))

    def with_updates(self, **changes) -> "SystemConfig":
        """Return a validated copy with some fields replaced."""
        values = {
            "n": self.n,
            "k": self.k,
            "lambda_": self.lambda_,
            "service": self.service,
            "seed": self.seed,
            "warmup_fraction": self.warmup_fraction,
            "horizon_jobs": self.horizon_jobs,
        }
        values.update(changes)
        return SystemConfig(**values)

    def describe(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "lambda": float(self.lambda_),
            "Lambda": self.job_rate,
            "rho": self.rho,
            "service": self.service.describe(),
            "seed": self.seed,
            "warmup_fraction": self.warmup_fraction,
            "horizon_jobs": self.horizon_jobs,
        }


def require_stable(lambda_: float, service: ServiceDistribution) -> float:
    """
    Check the stability of one M/G/1 queue

    Returns:
        The load rho

    Raises:
        UnstableSystemError: If lambda * E[service] >= 1
        ValueError: If lambda is negative
    """
    if lambda_ < 0:
        raise ValueError(f"lambda must be nonnegative, got {lambda_}")
    rho = float(lambda_) * service.mean
    if rho >= 1.0:
        raise UnstableSystemError(rho)
    return rho


# ---------------------------------------------------------------------------
# Combinatorics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CombinatorialContext:
    """
    Arithmetic mode for the subset combinatorics of an (n, k) system

    Exact mode returns Fractions; log-space mode evaluates binomials through
    log-gamma so that ratios never overflow.
    """

    EXACT_LIMIT: ClassVar[int] = 64

    n: int
    k: int
    exact: bool = True

    def __post_init__(self):
        if self.n < 1 or not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got n={self.n}, k={self.k}")

    @classmethod
    def for_system(cls, n: int, k: int) -> "CombinatorialContext":
        """Exact arithmetic up to n = 64, log-space beyond."""
        return cls(n=n, k=k, exact=n <= cls.EXACT_LIMIT)


def log_binomial(a: int, b: int) -> float:
    """log C(a, b); -inf when the coefficient is zero."""
    if b < 0 or b > a:
        return -math.inf
    return math.lgamma(a + 1) - math.lgamma(b + 1) - math.lgamma(a - b + 1)


def binomial(ctx: CombinatorialContext, a: int, b: int) -> Number:
    """
    Binomial coefficient C(a, b) in the context's arithmetic

    Args:
        ctx: Arithmetic mode
        a: Population size (nonnegative)
        b: Subset size (nonnegative); b > a gives 0

    Returns:
        Fraction in exact mode, float in log-space mode
    """
    if a < 0 or b < 0:
        raise ValueError(f"binomial arguments must be nonnegative, got ({a}, {b})")
    if ctx.exact:
        return Fraction(math.comb(a, b))
    if b > a:
        return 0.0
    return math.exp(log_binomial(a, b))


def _binomial_ratio(ctx: CombinatorialContext, a: int, b: int, c: int, d: int) -> Number:
    """C(a, b) / C(c, d) without forming large intermediates in log mode."""
    if ctx.exact:
        return Fraction(math.comb(a, b), math.comb(c, d))
    top = log_binomial(a, b)
    if top == -math.inf:
        return 0.0
    return math.exp(top - log_binomial(c, d))


def p_select_le1(n: int, k: int, ctx: Optional[CombinatorialContext] = None) -> Number:
    """
    Probability that a job selects at most one of the queues 1..k

    p = [C(n-k, k) + k C(n-k, k-1)] / C(n, k)
    """
    ctx = ctx or CombinatorialContext.for_system(n, k)
    none = _binomial_ratio(ctx, n - k, k, n, k)
    one = _binomial_ratio(ctx, n - k, k - 1, n, k)
    return none + k * one


def lambda_tilde(n: int, k: int, lambda_: Number, ctx: Optional[CombinatorialContext] = None) -> Number:
    """
    Task arrival rate to each of the first k queues of the coupled system

    lambda~ = (Lambda / k) (1 - C(n-k, k) / C(n, k)) with Lambda = n lambda / k.
    Exact inputs (int or Fraction) in exact mode give an exact Fraction.
    """
    ctx = ctx or CombinatorialContext.for_system(n, k)
    miss = _binomial_ratio(ctx, n - k, k, n, k)
    if ctx.exact and not isinstance(lambda_, float):
        job_rate = Fraction(n) * Fraction(lambda_) / k
        return job_rate / k * (1 - miss)
    job_rate = n * float(lambda_) / k
    return job_rate / k * (1.0 - float(miss))


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def random_stream(seed: int, replication_index: int) -> np.random.Generator:
    """
    Deterministic random stream for one replication

    The stream is a PCG64 generator seeded from SeedSequence(seed,
    spawn_key=(replication_index,)), so distinct replication indices give
    statistically independent streams and any worker can rebuild any stream.

    Within a fork-join replication draws are taken block by block; for each
    block: job inter-arrival gaps, then the uniforms driving server-subset
    selection, then the service times in ascending queue-index order.

    Args:
        seed: 64-bit master seed
        replication_index: Nonnegative replication number

    Returns:
        numpy Generator owned by exactly one replication
    """
    if replication_index < 0:
        raise ValueError(f"replication_index must be nonnegative, got {replication_index}")
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(replication_index,))
    return np.random.Generator(np.random.PCG64(sequence))


class SubsetSampler:
    """
    Partial Fisher-Yates sampler of uniformly random k-subsets of n servers

    Each row keeps a persistent index pool. Any permutation is a valid
    starting pool, so a row is never reset between jobs: the first k
    positions after k swap steps form a uniform k-subset regardless of the
    previous arrangement. The work per job is O(k).

    Attributes:
        n (int): Number of servers
        k (int): Subset size
        rows (int): Number of jobs sampled per vectorised call
    """

    # Keeps the per-block pool near 4M entries
    POOL_ENTRIES = 1 << 22

    def __init__(self, n: int, k: int, rows: Optional[int] = None):
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got n={n}, k={k}")
        self.n = n
        self.k = k
        self.rows = rows or max(1, min(4096, self.POOL_ENTRIES // n))
        self._pool = np.tile(np.arange(n, dtype=np.int64), (self.rows, 1))
        self._row_index = np.arange(self.rows)

    def draw(self, uniforms: np.ndarray) -> np.ndarray:
        """
        Map a (jobs, k) block of uniforms in [0, 1) to server subsets

        Args:
            uniforms: Array of shape (jobs, k) with jobs <= rows

        Returns:
            Integer array of shape (jobs, k), each row sorted ascending
        """
        jobs = uniforms.shape[0]
        if jobs > self.rows:
            raise ValueError(f"block of {jobs} jobs exceeds sampler rows {self.rows}")
        pool = self._pool[:jobs]
        rows = self._row_index[:jobs]
        for j in range(self.k):
            remaining = self.n - j
            target = j + np.minimum((uniforms[:, j] * remaining).astype(np.int64), remaining - 1)
            chosen = pool[rows, target]
            pool[rows, target] = pool[:, j].copy()
            pool[:, j] = chosen
        return np.sort(pool[:, : self.k], axis=1)


def draw_subsets(rng: np.random.Generator, n: int, k: int, jobs: int) -> np.ndarray:
    """Convenience wrapper drawing `jobs` subsets with a fresh sampler."""
    sampler = SubsetSampler(n, k, rows=max(1, jobs))
    return sampler.draw(rng.random((jobs, k)))


def as_fraction(value: Union[Number, str]) -> Fraction:
    """Parse ints, floats, Fractions and strings such as '2/3' exactly."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value)


def ceil_power(n: int, exponent: Union[float, Fraction]) -> int:
    """
    k = ceil(n ** exponent), with float noise around integers removed

    1024 ** 0.9 evaluates to 512.0000000000001 in floating point; values
    within 1e-9 of an integer are snapped before taking the ceiling.
    """
    value = float(n) ** float(exponent)
    nearest = round(value)
    if abs(value - nearest) < 1e-9:
        return max(1, int(nearest))
    return max(1, math.ceil(value))


def parse_service(spec: dict) -> ServiceDistribution:
    """Build a ServiceDistribution from a describe()-style mapping."""
    kind = spec.get("distribution", "exponential")
    if kind == Exponential.tag:
        return Exponential(mu=float(spec.get("mu", 1.0)))
    if kind == Deterministic.tag:
        return Deterministic(value=float(spec.get("value", 1.0)))
    if kind == HyperExponential.tag:
        return HyperExponential(weights=tuple(spec["weights"]), rates=tuple(spec["rates"]))
    if kind == TruncatedPareto.tag:
        return TruncatedPareto(
            alpha=float(spec["alpha"]), xmin=float(spec["xmin"]), xmax=float(spec["xmax"])
        )
    raise ValueError(f"Unknown service distribution {kind!r}")


SERVICE_TAGS: Sequence[str] = (
    Exponential.tag,
    Deterministic.tag,
    HyperExponential.tag,
    TruncatedPareto.tag,
)
