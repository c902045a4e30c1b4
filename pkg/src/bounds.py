"""
Fork-Join Lab - Closed-Form Bounds

This module holds the independence upper bound on job delay and the
closed forms it is compared with.

Features:
- Task-delay CDF F, analytic for M/M/1 or empirical from a single-queue run
- Independence bound P(T^ > tau) = 1 - F(tau)^k, evaluated without
  cancellation in the tail
- Harmonic numbers and the H_k / (mu - lambda) mean of the bound
- Geometric tau grids resolving both body and tail of the bound
- Mean first passage to empty from stationarity, lambda g2 / (2 (1 - rho)^2)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import integrate

from .model import ServiceDistribution, require_stable

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

DEFAULT_GRID_POINTS = 200
GRID_BODY_QUANTILE = 0.01
GRID_TAIL_PROBABILITY = 1e-4


class TaskDelayCdf:
    """
    Marginal task-delay distribution F

    Subclasses provide survival(tau) = 1 - F(tau) and the quantile function;
    cdf() is derived. Evaluations are vectorised over numpy arrays.
    """

    def survival(self, tau: ArrayLike) -> ArrayLike:
        raise NotImplementedError

    def quantile(self, q: float) -> float:
        raise NotImplementedError

    def cdf(self, tau: ArrayLike) -> ArrayLike:
        return 1.0 - self.survival(tau)

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class AnalyticMM1(TaskDelayCdf):
    """M/M/1 sojourn time: F(tau) = 1 - exp(-(mu - lambda) tau)."""

    lambda_: float
    mu: float = 1.0

    def __post_init__(self):
        if not 0 <= self.lambda_ < self.mu:
            raise ValueError(
                f"M/M/1 task delay needs 0 <= lambda < mu, got lambda={self.lambda_}, mu={self.mu}"
            )

    @property
    def decay(self) -> float:
        return float(self.mu) - float(self.lambda_)

    def survival(self, tau: ArrayLike) -> ArrayLike:
        tau = np.asarray(tau, dtype=float)
        value = np.where(tau < 0, 1.0, np.exp(-self.decay * np.maximum(tau, 0.0)))
        return value if value.ndim else float(value)

    def quantile(self, q: float) -> float:
        if not 0 <= q < 1:
            raise ValueError(f"quantile level must lie in [0, 1), got {q}")
        return -math.log1p(-q) / self.decay

    def describe(self) -> dict:
        return {"kind": "analytic_mm1", "lambda": float(self.lambda_), "mu": float(self.mu)}


@dataclass(frozen=True)
class Empirical(TaskDelayCdf):
    """Empirical F from single-queue sojourn samples (stored sorted)."""

    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.sort(np.asarray(self.samples, dtype=float))
        if values.size == 0:
            raise ValueError("empirical task-delay CDF needs at least one sample")
        object.__setattr__(self, "samples", values)

    def survival(self, tau: ArrayLike) -> ArrayLike:
        tau = np.asarray(tau, dtype=float)
        value = 1.0 - np.searchsorted(self.samples, tau, side="right") / self.samples.size
        return value if value.ndim else float(value)

    def quantile(self, q: float) -> float:
        if not 0 <= q <= 1:
            raise ValueError(f"quantile level must lie in [0, 1], got {q}")
        return float(np.quantile(self.samples, q))

    def describe(self) -> dict:
        return {"kind": "empirical", "samples": int(self.samples.size)}


def task_cdf_mm1(lambda_: float, mu: float, tau: ArrayLike) -> ArrayLike:
    """
    CDF of the M/M/1 sojourn time, 1 - exp(-(mu - lambda) tau)

    Raises:
        ValueError: If lambda >= mu or tau < 0
    """
    if np.any(np.asarray(tau) < 0):
        raise ValueError("tau must be nonnegative")
    return AnalyticMM1(lambda_, mu).cdf(tau)


def independence_ccdf(F: TaskDelayCdf, k: int, tau: ArrayLike) -> ArrayLike:
    """
    Tail of the maximum of k independent task delays, 1 - F(tau)^k

    Evaluated as -expm1(k log1p(-(1 - F))) so the tail keeps full relative
    precision when F(tau) is close to 1.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    tail = np.asarray(F.survival(tau), dtype=float)
    with np.errstate(divide="ignore"):
        value = -np.expm1(k * np.log1p(-tail))
    value = np.clip(value, 0.0, 1.0)
    return value if value.ndim else float(value)


def harmonic(m: int) -> float:
    """m-th harmonic number with exactly rounded summation."""
    if m < 1:
        raise ValueError(f"harmonic number needs m >= 1, got {m}")
    return math.fsum(1.0 / j for j in range(1, m + 1))


def asymptotic_mean_mm1(k: int, lambda_: float, mu: float) -> float:
    """
    H_k / (mu - lambda): the mean of the independence bound under exponential service

    Raises:
        ValueError: If lambda >= mu
    """
    if not lambda_ < mu:
        raise ValueError(f"need lambda < mu, got lambda={lambda_}, mu={mu}")
    return harmonic(k) / (mu - lambda_)


def bound_mean(F: TaskDelayCdf, k: int) -> float:
    """
    Mean of the independence bound, integral of 1 - F(tau)^k over tau >= 0

    Uses adaptive quadrature for analytic F and the exact sum over order
    statistics for empirical F.
    """
    if isinstance(F, Empirical):
        x = F.samples
        steps = np.diff(np.concatenate(([0.0], x)))
        below = np.arange(x.size) / x.size
        return float(np.sum(steps * (1.0 - below ** k)))
    value, _ = integrate.quad(lambda t: independence_ccdf(F, k, t), 0.0, np.inf, limit=200)
    return float(value)


def ccdf_grid(F: TaskDelayCdf, k: int, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """
    Geometric tau grid from the 1% quantile of F to the point where the bound
    falls to 1e-4

    The upper end solves 1 - F(tau)^k = 1e-4, i.e. F(tau) = (1 - 1e-4)^(1/k).
    """
    lower = F.quantile(GRID_BODY_QUANTILE)
    upper = F.quantile(math.exp(math.log1p(-GRID_TAIL_PROBABILITY) / k))
    lower = max(lower, 1e-9)
    if not upper > lower:
        upper = lower * 10.0
    logger.debug("CCDF grid for k=%d: [%.4g, %.4g] with %d points", k, lower, upper, points)
    return np.geomspace(lower, upper, points)


def busy_period_mean(lambda_: float, service: ServiceDistribution) -> float:
    """Mean first passage to empty from stationarity, lambda g2 / (2 (1 - rho)^2)."""
    rho = require_stable(lambda_, service)
    return lambda_ * service.second_moment / (2.0 * (1.0 - rho) ** 2)


def mg1_mean_sojourn(lambda_: float, service: ServiceDistribution) -> float:
    """Pollaczek-Khinchine mean sojourn time, E[S] + lambda g2 / (2 (1 - rho))."""
    rho = require_stable(lambda_, service)
    return service.mean + lambda_ * service.second_moment / (2.0 * (1.0 - rho))
