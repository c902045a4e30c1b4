"""
Fork-Join Lab - Association Oracle

This module checks, in exact arithmetic, when the arrival-indicator vector
of the first k queues is associated under Poisson oversampling.

Observations are taken at job arrivals and at the jumps of an independent
Poisson process of rate beta. At an observation, A_i = 1 when a job arrived
and sent a task to queue i. Without oversampling the pattern is negatively
associated (a balls-and-bins occupancy vector); a large enough beta makes
it associated.

Features:
- Exact rational law of the pattern A over {0,1}^k
- Enumeration of all monotone boolean functions on k <= 5 variables
- Exhaustive association check over pairs of monotone functions using
  integer arithmetic on a common denominator
- The beta threshold that guarantees association
- Pairwise covariance screen
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .model import as_fraction

logger = logging.getLogger(__name__)

MAX_ENUMERATION_K = 5
DEFAULT_EXHAUSTIVE_K = 4

Rate = Union[int, float, str, Fraction]


class EnumerationLimitError(ValueError):
    """Raised when exhaustive enumeration is requested beyond its bound."""


# ---------------------------------------------------------------------------
# Arrival patterns
# ---------------------------------------------------------------------------


def pattern_mask(pattern: Sequence[int]) -> int:
    """Encode (a_1, ..., a_k) with a_i as bit i - 1."""
    return sum(1 << i for i, bit in enumerate(pattern) if bit)


def mask_pattern(mask: int, k: int) -> Tuple[int, ...]:
    return tuple((mask >> i) & 1 for i in range(k))


@dataclass(frozen=True)
class ArrivalPatternDist:
    """
    Exact law of the arrival-indicator vector under Poisson oversampling

    Attributes:
        n (int): Number of servers
        k (int): Pattern width (tasks per job)
        Lambda (Fraction): Job arrival rate
        beta (Fraction): Oversampling rate
        probabilities (tuple): Probability of each pattern, indexed by mask
    """

    n: int
    k: int
    Lambda: Fraction
    beta: Fraction
    probabilities: Tuple[Fraction, ...]

    def probability(self, pattern: Sequence[int]) -> Fraction:
        if len(pattern) != self.k:
            raise ValueError(f"pattern must have length {self.k}")
        return self.probabilities[pattern_mask(pattern)]

    def as_mapping(self) -> Dict[Tuple[int, ...], Fraction]:
        return {mask_pattern(mask, self.k): p for mask, p in enumerate(self.probabilities)}

    def marginal(self, i: int) -> Fraction:
        """P(A_i = 1) for the 0-based coordinate i."""
        return sum((p for mask, p in enumerate(self.probabilities) if mask >> i & 1), Fraction(0))

    def expectation(self, table: int) -> Fraction:
        """E[f(A)] for a boolean function given by its truth table."""
        return sum(
            (p for mask, p in enumerate(self.probabilities) if table >> mask & 1), Fraction(0)
        )


def arrival_pattern_dist(n: int, k: int, Lambda: Rate, beta: Rate) -> ArrivalPatternDist:
    """
    Exact law of A in {0,1}^k at one observation of the oversampled system

    With probability Lambda / (Lambda + beta) the observation is a job
    arrival, which hits a given set of m of the first k queues with
    probability C(n-k, k-m) / C(n, k). The all-zero pattern also absorbs the
    oversampling jumps.
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got n={n}, k={k}")
    Lambda = as_fraction(Lambda)
    beta = as_fraction(beta)
    if not Lambda > 0:
        raise ValueError(f"Lambda must be positive, got {Lambda}")
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")

    arrive = Lambda / (Lambda + beta)
    total = math.comb(n, k)
    probabilities = []
    for mask in range(1 << k):
        m = bin(mask).count("1")
        hit = Fraction(math.comb(n - k, k - m), total)
        probabilities.append(arrive * hit if m else (1 - arrive) + arrive * hit)
    return ArrivalPatternDist(n=n, k=k, Lambda=Lambda, beta=beta, probabilities=tuple(probabilities))


# ---------------------------------------------------------------------------
# Monotone boolean functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class MonotoneBooleanFunction:
    """
    Entrywise nondecreasing f: {0,1}^k -> {0,1} stored as a truth table

    Bit `mask` of `table` is f evaluated at the pattern encoded by `mask`.
    """

    k: int
    table: int

    def __call__(self, pattern: Sequence[int]) -> int:
        return self.table >> pattern_mask(pattern) & 1

    @property
    def is_constant(self) -> bool:
        return self.table in (0, (1 << (1 << self.k)) - 1)

    def __and__(self, other: "MonotoneBooleanFunction") -> "MonotoneBooleanFunction":
        return MonotoneBooleanFunction(self.k, self.table & other.table)

    def __or__(self, other: "MonotoneBooleanFunction") -> "MonotoneBooleanFunction":
        return MonotoneBooleanFunction(self.k, self.table | other.table)

    def describe(self) -> str:
        """Minimal true patterns, e.g. 'a1|a2a3'; '0' and '1' for constants."""
        if self.table == 0:
            return "0"
        ones = [mask for mask in range(1 << self.k) if self.table >> mask & 1]
        minimal = [m for m in ones if not any(o != m and o & m == o for o in ones)]
        if minimal == [0]:
            return "1"
        terms = ["".join(f"a{i + 1}" for i in range(self.k) if m >> i & 1) for m in minimal]
        return "|".join(terms)


def is_monotone(table: int, k: int) -> bool:
    """Check a truth table for entrywise monotonicity."""
    for mask in range(1 << k):
        if not table >> mask & 1:
            continue
        # f(mask) = 1: raising any coordinate must keep it 1
        for i in range(k):
            if not mask >> i & 1 and not table >> (mask | 1 << i) & 1:
                return False
    return True


@lru_cache(maxsize=None)
def _monotone_tables(k: int) -> Tuple[int, ...]:
    if k == 0:
        return (0, 1)
    lower = _monotone_tables(k - 1)
    shift = 1 << (k - 1)
    tables = [f0 | f1 << shift for f0 in lower for f1 in lower if f0 & ~f1 == 0]
    return tuple(sorted(tables))


def enumerate_monotone_functions(k: int) -> List[MonotoneBooleanFunction]:
    """
    All monotone boolean functions on {0,1}^k, sorted by truth table

    A monotone f splits on its last variable into f0 <= f1, both monotone
    on k - 1 variables, which builds the list recursively. The count is the
    Dedekind number: 3, 6, 20, 168, 7581 for k = 1..5.

    Raises:
        EnumerationLimitError: If k > 5
    """
    if k < 0:
        raise ValueError(f"k must be nonnegative, got {k}")
    if k > MAX_ENUMERATION_K:
        raise EnumerationLimitError(
            f"Monotone functions are enumerated only for k <= {MAX_ENUMERATION_K}; "
            f"k={k} has a Dedekind number beyond exhaustive reach"
        )
    return [MonotoneBooleanFunction(k, table) for table in _monotone_tables(k)]


# ---------------------------------------------------------------------------
# Association check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Counterexample:
    """A pair of monotone functions with E[fg] < E[f] E[g]."""

    f: MonotoneBooleanFunction
    g: MonotoneBooleanFunction
    joint: Fraction
    product: Fraction

    @property
    def gap(self) -> Fraction:
        return self.joint - self.product


@dataclass(frozen=True)
class AssociationVerdict:
    """
    Result of the exhaustive association check

    Attributes:
        associated (bool): No pair of monotone functions violates the inequality
        counterexample (Optional[Counterexample]): Lexicographically first violation
        pairs_checked (int): Unordered non-constant pairs examined
    """

    associated: bool
    counterexample: Optional[Counterexample]
    pairs_checked: int


def _integer_weights(dist: ArrivalPatternDist) -> Tuple[int, List[int]]:
    denominator = 1
    for p in dist.probabilities:
        denominator = math.lcm(denominator, p.denominator)
    weights = [int(p * denominator) for p in dist.probabilities]
    return denominator, weights


def _byte_tables(weights: Sequence[int]) -> List[List[int]]:
    """Sum of weights over each byte of a truth table, per byte position."""
    tables = []
    for start in range(0, len(weights), 8):
        chunk = list(weights[start:start + 8]) + [0] * (8 - len(weights[start:start + 8]))
        tables.append([sum(chunk[b] for b in range(8) if byte >> b & 1) for byte in range(256)])
    return tables


def _table_weight(table: int, luts: Sequence[Sequence[int]]) -> int:
    return sum(lut[(table >> (8 * pos)) & 255] for pos, lut in enumerate(luts))


def _scan_rows(args) -> Optional[Tuple[int, int]]:
    """First violating (i, j), i in [start, stop), j > i, or None."""
    tables, weights, denominator, luts, start, stop = args
    count = len(tables)
    if denominator * denominator < 2 ** 62:
        table_array = np.array(tables, dtype=np.uint64)
        weight_array = np.array(weights, dtype=np.int64)
        lut_arrays = [np.array(lut, dtype=np.int64) for lut in luts]
        for i in range(start, stop):
            inter = table_array[i] & table_array[i + 1:]
            joint = np.zeros(len(inter), dtype=np.int64)
            for pos, lut in enumerate(lut_arrays):
                joint += lut[((inter >> np.uint64(8 * pos)) & np.uint64(255)).astype(np.int64)]
            hits = np.flatnonzero(denominator * joint < weight_array[i] * weight_array[i + 1:])
            if hits.size:
                return i, i + 1 + int(hits[0])
        return None
    for i in range(start, stop):
        wi = weights[i]
        for j in range(i + 1, count):
            if denominator * _table_weight(tables[i] & tables[j], luts) < wi * weights[j]:
                return i, j
    return None


def check_association(
    dist: ArrivalPatternDist,
    workers: int = 1,
    long_running: bool = False,
) -> AssociationVerdict:
    """
    Exhaustively test E[f(A) g(A)] >= E[f(A)] E[g(A)] over monotone f, g

    Binary monotone functions suffice for association. Pairs are unordered
    (the inequality is symmetric), constants and diagonal pairs are skipped
    (they hold with equality or trivially). Probabilities are scaled to
    integers over their common denominator so every comparison is exact.

    Args:
        dist: Pattern law with k <= 5
        workers: Processes sharing the outer loop; the verdict is independent
            of this value
        long_running: Required for k = 5 (about 29M pairs)

    Raises:
        EnumerationLimitError: If k > 5, or k = 5 without long_running
    """
    if dist.k > MAX_ENUMERATION_K:
        raise EnumerationLimitError(f"association check supports k <= {MAX_ENUMERATION_K}, got {dist.k}")
    if dist.k > DEFAULT_EXHAUSTIVE_K and not long_running:
        raise EnumerationLimitError(
            f"k={dist.k} takes minutes; pass long_running=True to run it"
        )

    functions = [f for f in enumerate_monotone_functions(dist.k) if not f.is_constant]
    tables = [f.table for f in functions]
    denominator, mask_weights = _integer_weights(dist)
    luts = _byte_tables(mask_weights)
    weights = [_table_weight(t, luts) for t in tables]
    count = len(tables)
    pairs = count * (count - 1) // 2

    if workers <= 1 or count < 64:
        hit = _scan_rows((tables, weights, denominator, luts, 0, count))
    else:
        bounds = np.linspace(0, count, workers + 1).astype(int)
        jobs = [(tables, weights, denominator, luts, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scan_rows, jobs))
        hit = next((r for r in results if r is not None), None)

    if hit is None:
        logger.debug("association holds for n=%d k=%d beta=%s (%d pairs)", dist.n, dist.k, dist.beta, pairs)
        return AssociationVerdict(associated=True, counterexample=None, pairs_checked=pairs)

    f, g = functions[hit[0]], functions[hit[1]]
    example = Counterexample(
        f=f,
        g=g,
        joint=dist.expectation(f.table & g.table),
        product=dist.expectation(f.table) * dist.expectation(g.table),
    )
    logger.debug("association fails for n=%d k=%d beta=%s: %s", dist.n, dist.k, dist.beta, example)
    return AssociationVerdict(associated=False, counterexample=example, pairs_checked=pairs)


def beta_threshold(n: int, k: int, Lambda: Rate) -> Fraction:
    """
    Oversampling rate that makes the pattern associated

    max(0, Lambda (C(n, k) p^2 - 1)), where p = 1 if k > n/2 and
    p = (C(n, k) - C(n-k, k)) / C(n, k) otherwise, i.e. the probability
    that a job sends at least one task to the first k queues.
    """
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got n={n}, k={k}")
    Lambda = as_fraction(Lambda)
    total = math.comb(n, k)
    p = Fraction(1) if 2 * k > n else Fraction(total - math.comb(n - k, k), total)
    return max(Fraction(0), Lambda * (total * p * p - 1))


def covariance_check(dist: ArrivalPatternDist) -> Dict[Tuple[int, int], Fraction]:
    """
    Exact Cov(A_i, A_j) for every pair i < j (0-based)

    Nonnegative pairwise covariance is necessary for association, so a
    negative entry already rules it out.
    """
    marginals = [dist.marginal(i) for i in range(dist.k)]
    result = {}
    for i, j in itertools.combinations(range(dist.k), 2):
        both = sum(
            (p for mask, p in enumerate(dist.probabilities) if mask >> i & 1 and mask >> j & 1),
            Fraction(0),
        )
        result[(i, j)] = both - marginals[i] * marginals[j]
    return result
