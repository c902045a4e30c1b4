"""
Fork-Join Lab - Configuration

This module reads experiment configuration files and turns them into a
validated SystemConfig plus a Scenario.

Features:
- INI-style files with [system], [service], [scenario] and [output] sections
- Exact fractions for rates ("2/3") and scientific integers ("1e5")
- Declared defaults for every optional key
- Unknown sections, unknown keys, malformed and out-of-range values are
  rejected with the line number of the offending key
"""

from __future__ import annotations

import configparser
import logging
import math
import os
import re
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .model import (
    Deterministic,
    Exponential,
    HyperExponential,
    SERVICE_TAGS,
    ServiceDistribution,
    SystemConfig,
    TruncatedPareto,
    UnstableSystemError,
    as_fraction,
)
from .simulator import MIN_SNAPSHOT_SPACING

logger = logging.getLogger(__name__)

SCENARIO_NAMES: Tuple[str, ...] = (
    "figure1",
    "dominance",
    "coupling",
    "busy",
    "assoc",
    "theorem3",
    "scaling",
    "single-queue",
)

DEFAULT_N = 16
DEFAULT_K = 4
DEFAULT_HYPEREXPONENTIAL_SCV = 4.0
DEFAULT_PARETO_ALPHA = 1.5
DEFAULT_PARETO_RATIO = 100.0

_SECTION_KEYS: Dict[str, Tuple[str, ...]] = {
    "system": ("n", "k", "lambda", "seed", "warmup_fraction", "horizon_jobs"),
    "service": ("distribution", "mu", "value", "weights", "rates", "alpha", "xmin", "xmax"),
    "scenario": (
        "name",
        "replications",
        "n_values",
        "k_exponents",
        "loads",
        "pairs",
        "coupling_horizon",
        "coupling_runs",
        "busy_samples",
        "betas",
        "snapshots",
        "sample_interval",
        "covariance_snapshots",
        "long_running",
    ),
    "output": ("directory", "check"),
}

_SERVICE_KEYS: Dict[str, Tuple[str, ...]] = {
    Exponential.tag: ("distribution", "mu"),
    Deterministic.tag: ("distribution", "mu", "value"),
    HyperExponential.tag: ("distribution", "mu", "weights", "rates"),
    TruncatedPareto.tag: ("distribution", "mu", "alpha", "xmin", "xmax"),
}


class ConfigError(ValueError):
    """
    Invalid configuration file

    Attributes:
        path (str): File being parsed
        line (Optional[int]): 1-based line of the offending entry
        section (Optional[str]): Section of the offending key
        key (Optional[str]): Offending key
        problem (str): What is wrong
    """

    def __init__(
        self,
        problem: str,
        path: str = "<config>",
        line: Optional[int] = None,
        section: Optional[str] = None,
        key: Optional[str] = None,
    ):
        self.problem = problem
        self.path = path
        self.line = line
        self.section = section
        self.key = key
        super().__init__(str(self))

    def __str__(self) -> str:
        where = self.path if self.line is None else f"{self.path}:{self.line}"
        target = ""
        if self.section:
            target = f" [{self.section}]"
        if self.key:
            target += f" {self.key}"
        return f"{where}:{target}: {self.problem}" if target else f"{where}: {self.problem}"


@dataclass(frozen=True)
class Scenario:
    """
    One experiment with its parameter overrides

    Empty sweep fields fall back to the per-scenario defaults the harness
    declares.

    Attributes:
        name (str): One of SCENARIO_NAMES
        replications (int): Independent replications per configuration
        n_values (tuple): Server counts swept by figure1 and scaling
        k_exponents (tuple): Exponents c with k = ceil(n^c)
        loads (tuple): Per-queue loads rho
        pairs (tuple): Explicit (n, k) configurations
        coupling_horizon (float): Window tau of the coupling experiment
        coupling_runs (int): Coupled replications
        busy_samples (int): Inspection epochs of the busy-period experiment
        betas (tuple): Oversampling rates as multiples of Lambda, or 'threshold'
        snapshots (int): Queue-length snapshots per configuration
        sample_interval (float): Time between snapshots
        covariance_snapshots (int): Workload snapshots behind each dominance
            covariance estimate
        long_running (bool): Allow k = 5 association checks
        output_dir (str): Directory receiving data files
        check (bool): Turn failed verdicts into a nonzero exit status
    """

    DEFAULT_REPLICATIONS = 20
    DEFAULT_COUPLING_HORIZON = 5.0
    DEFAULT_COUPLING_RUNS = 100_000
    DEFAULT_BUSY_SAMPLES = 100_000
    DEFAULT_SNAPSHOTS = 500_000
    DEFAULT_SAMPLE_INTERVAL = 2.0
    DEFAULT_COVARIANCE_SNAPSHOTS = 20_000
    DEFAULT_OUTPUT_DIR = "results"

    name: str
    replications: int = 20
    n_values: Tuple[int, ...] = ()
    k_exponents: Tuple[Fraction, ...] = ()
    loads: Tuple[Fraction, ...] = ()
    pairs: Tuple[Tuple[int, int], ...] = ()
    coupling_horizon: float = 5.0
    coupling_runs: int = 100_000
    busy_samples: int = 100_000
    betas: Tuple[str, ...] = ()
    snapshots: int = 500_000
    sample_interval: float = 2.0
    covariance_snapshots: int = 20_000
    long_running: bool = False
    output_dir: str = "results"
    check: bool = False

    def __post_init__(self):
        if self.name not in SCENARIO_NAMES:
            raise ValueError(
                f"Unknown scenario {self.name!r}; expected one of {', '.join(SCENARIO_NAMES)}"
            )
        if self.replications < 1:
            raise ValueError(f"replications must be at least 1, got {self.replications}")

    def with_updates(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "replications": self.replications,
            "n_values": list(self.n_values),
            "k_exponents": [str(c) for c in self.k_exponents],
            "loads": [str(r) for r in self.loads],
            "pairs": [list(p) for p in self.pairs],
            "coupling_horizon": self.coupling_horizon,
            "coupling_runs": self.coupling_runs,
            "busy_samples": self.busy_samples,
            "betas": list(self.betas),
            "snapshots": self.snapshots,
            "sample_interval": self.sample_interval,
            "covariance_snapshots": self.covariance_snapshots,
            "long_running": self.long_running,
            "output_dir": self.output_dir,
            "check": self.check,
        }


# ---------------------------------------------------------------------------
# Value parsers
# ---------------------------------------------------------------------------


def _split(raw: str) -> List[str]:
    return [token.strip() for token in raw.split(",") if token.strip()]


def parse_int(raw: str) -> int:
    """Integers, also written in scientific form such as 1e5."""
    text = raw.strip()
    try:
        return int(text)
    except ValueError:
        value = float(text)
        if not math.isfinite(value) or value != int(value):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)


def parse_fraction(raw: str) -> Fraction:
    try:
        return as_fraction(raw)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"expected a number or fraction such as 2/3, got {raw!r}")


def parse_pairs(raw: str) -> Tuple[Tuple[int, int], ...]:
    """Pairs written as 'n:k, n:k'."""
    pairs = []
    for token in _split(raw):
        parts = token.split(":")
        if len(parts) != 2:
            raise ValueError(f"expected n:k, got {token!r}")
        pairs.append((parse_int(parts[0]), parse_int(parts[1])))
    return tuple(pairs)


def parse_beta_token(token: str) -> str:
    """'threshold' or a nonnegative multiple of Lambda."""
    token = token.strip().lower()
    if token == "threshold":
        return token
    value = parse_fraction(token)
    if value < 0:
        raise ValueError(f"beta multiples must be nonnegative, got {token}")
    return str(value)


# ---------------------------------------------------------------------------
# File parsing
# ---------------------------------------------------------------------------


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=#;\s][^=]*?)\s*=")


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """Map (section, key) to the 1-based line defining it."""
    lines: Dict[Tuple[str, str], int] = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_RE.match(line)
        if header:
            section = header.group(1).strip().lower()
            lines[(section, "")] = number
            continue
        if section is None or line[:1].isspace():
            continue
        key = _KEY_RE.match(line)
        if key:
            lines.setdefault((section, key.group(1).strip().lower()), number)
    return lines


class _Reader:
    """Typed access to a parsed file with line-numbered errors."""

    def __init__(self, parser: configparser.ConfigParser, path: str, lines: Dict[Tuple[str, str], int]):
        self.parser = parser
        self.path = path
        self.lines = lines

    def error(self, section: str, key: Optional[str], problem: str) -> ConfigError:
        line = self.lines.get((section, key or ""), self.lines.get((section, "")))
        return ConfigError(problem, path=self.path, line=line, section=section, key=key)

    def has(self, section: str, key: str) -> bool:
        return self.parser.has_option(section, key)

    def raw(self, section: str, key: str) -> str:
        return self.parser.get(section, key)

    def get(self, section: str, key: str, convert, default=None):
        if not self.has(section, key):
            return default
        raw = self.raw(section, key)
        try:
            return convert(raw)
        except (ValueError, ZeroDivisionError) as e:
            raise self.error(section, key, f"invalid value {raw!r}: {e}") from e

    def get_bool(self, section: str, key: str, default: bool) -> bool:
        if not self.has(section, key):
            return default
        try:
            return self.parser.getboolean(section, key)
        except ValueError as e:
            raise self.error(section, key, f"expected true/false, got {self.raw(section, key)!r}") from e


def _read_service(reader: _Reader) -> ServiceDistribution:
    section = "service"
    kind = reader.get(section, "distribution", lambda s: s.strip().lower(), Exponential.tag)
    if kind not in SERVICE_TAGS:
        raise reader.error(section, "distribution", f"unknown distribution {kind!r}; expected one of {', '.join(SERVICE_TAGS)}")
    if reader.parser.has_section(section):
        for key in reader.parser.options(section):
            if key not in _SECTION_KEYS[section]:
                raise reader.error(section, key, "unknown key")
            if key not in _SERVICE_KEYS[kind]:
                raise reader.error(section, key, f"key does not apply to {kind} service")

    mu = reader.get(section, "mu", parse_fraction, Fraction(1))
    if not mu > 0:
        raise reader.error(section, "mu", f"mu must be positive, got {mu}")
    mean = float(1 / mu)

    def floats(raw: str) -> Tuple[float, ...]:
        return tuple(float(parse_fraction(token)) for token in _split(raw))

    try:
        if kind == Exponential.tag:
            return Exponential(mu=float(mu))
        if kind == Deterministic.tag:
            value = reader.get(section, "value", parse_fraction, None)
            return Deterministic(value=float(value) if value is not None else mean)
        if kind == HyperExponential.tag:
            weights = reader.get(section, "weights", floats, None)
            rates = reader.get(section, "rates", floats, None)
            if weights is None and rates is None:
                return HyperExponential.balanced(mean=mean, scv=DEFAULT_HYPEREXPONENTIAL_SCV)
            if weights is None or rates is None:
                missing = "weights" if weights is None else "rates"
                raise reader.error(section, missing, "weights and rates must be given together")
            return HyperExponential(weights=weights, rates=rates)
        alpha = float(reader.get(section, "alpha", parse_fraction, DEFAULT_PARETO_ALPHA))
        xmin = reader.get(section, "xmin", parse_fraction, None)
        xmax = reader.get(section, "xmax", parse_fraction, None)
        if xmin is None and xmax is None:
            return TruncatedPareto.with_mean(mean, alpha=alpha, ratio=DEFAULT_PARETO_RATIO)
        if xmin is None or xmax is None:
            missing = "xmin" if xmin is None else "xmax"
            raise reader.error(section, missing, "xmin and xmax must be given together")
        return TruncatedPareto(alpha=alpha, xmin=float(xmin), xmax=float(xmax))
    except ConfigError:
        raise
    except ValueError as e:
        culprit = {
            HyperExponential.tag: "weights",
            TruncatedPareto.tag: "xmin",
            Deterministic.tag: "value",
        }.get(kind, "mu")
        raise reader.error(section, culprit, str(e)) from e


def _read_system(reader: _Reader, service: ServiceDistribution) -> SystemConfig:
    section = "system"
    n = reader.get(section, "n", parse_int, DEFAULT_N)
    k = reader.get(section, "k", parse_int, DEFAULT_K if n >= DEFAULT_K else 1)
    lambda_ = reader.get(section, "lambda", parse_fraction, SystemConfig.DEFAULT_LAMBDA)
    seed = reader.get(section, "seed", parse_int, 1)
    warmup = reader.get(section, "warmup_fraction", lambda s: float(parse_fraction(s)), SystemConfig.DEFAULT_WARMUP_FRACTION)
    horizon = reader.get(section, "horizon_jobs", parse_int, SystemConfig.DEFAULT_HORIZON_JOBS)

    if n < 1:
        raise reader.error(section, "n", f"n must be a positive integer, got {n}")
    if not 1 <= k <= n:
        raise reader.error(section, "k", f"k must satisfy 1 <= k <= n (n={n}), got {k}")
    if not lambda_ > 0:
        raise reader.error(section, "lambda", f"lambda must be positive, got {lambda_}")
    if not 0 <= seed < 2 ** 64:
        raise reader.error(section, "seed", f"seed must lie in [0, 2^64), got {seed}")
    if not 0.0 <= warmup < 1.0:
        raise reader.error(section, "warmup_fraction", f"warmup_fraction must lie in [0, 1), got {warmup}")
    if horizon < 1:
        raise reader.error(section, "horizon_jobs", f"horizon_jobs must be positive, got {horizon}")
    try:
        return SystemConfig(
            n=n,
            k=k,
            lambda_=lambda_,
            service=service,
            seed=seed,
            warmup_fraction=warmup,
            horizon_jobs=horizon,
        )
    except UnstableSystemError as e:
        raise reader.error(section, "lambda", str(e)) from e


def _read_scenario(reader: _Reader, system: SystemConfig, scenario_name: Optional[str]) -> Scenario:
    section = "scenario"
    name = reader.get(section, "name", lambda s: s.strip().lower(), None)
    if scenario_name is not None:
        name = scenario_name
    if name is None:
        raise reader.error(section, "name", "scenario name is required (in the file or on the command line)")
    if name not in SCENARIO_NAMES:
        raise reader.error(section, "name", f"unknown scenario {name!r}; expected one of {', '.join(SCENARIO_NAMES)}")

    def positive_ints(raw: str) -> Tuple[int, ...]:
        values = tuple(parse_int(t) for t in _split(raw))
        if not values or any(v < 1 for v in values):
            raise ValueError("expected a list of positive integers")
        return values

    def exponents(raw: str) -> Tuple[Fraction, ...]:
        values = tuple(parse_fraction(t) for t in _split(raw))
        if not values or any(not 0 < c <= 1 for c in values):
            raise ValueError("exponents must lie in (0, 1]")
        return values

    def loads(raw: str) -> Tuple[Fraction, ...]:
        values = tuple(parse_fraction(t) for t in _split(raw))
        if not values or any(not 0 < r < 1 for r in values):
            raise ValueError("loads must lie in (0, 1)")
        return values

    def pairs(raw: str) -> Tuple[Tuple[int, int], ...]:
        values = parse_pairs(raw)
        for n, k in values:
            if n < 1 or not 1 <= k <= n:
                raise ValueError(f"pair {n}:{k} violates 1 <= k <= n")
        return values

    def betas(raw: str) -> Tuple[str, ...]:
        values = tuple(parse_beta_token(t) for t in _split(raw))
        if not values:
            raise ValueError("expected at least one beta")
        return values

    def positive_float(raw: str) -> float:
        value = float(parse_fraction(raw))
        if not value > 0:
            raise ValueError("must be positive")
        return value

    def positive_int(raw: str) -> int:
        value = parse_int(raw)
        if value < 1:
            raise ValueError("must be a positive integer")
        return value

    def spacing(raw: str) -> float:
        value = positive_float(raw)
        shortest = MIN_SNAPSHOT_SPACING * system.service.mean
        if value < shortest:
            raise ValueError(f"snapshots must be at least 2/mu = {shortest:g} apart")
        return value

    explicit_pair = reader.has("system", "n") or reader.has("system", "k")
    default_pairs = ((system.n, system.k),) if explicit_pair else ()

    return Scenario(
        name=name,
        replications=reader.get(section, "replications", positive_int, Scenario.DEFAULT_REPLICATIONS),
        n_values=reader.get(section, "n_values", positive_ints, ()),
        k_exponents=reader.get(section, "k_exponents", exponents, ()),
        loads=reader.get(section, "loads", loads, ()),
        pairs=reader.get(section, "pairs", pairs, default_pairs),
        coupling_horizon=reader.get(section, "coupling_horizon", positive_float, Scenario.DEFAULT_COUPLING_HORIZON),
        coupling_runs=reader.get(section, "coupling_runs", positive_int, Scenario.DEFAULT_COUPLING_RUNS),
        busy_samples=reader.get(section, "busy_samples", positive_int, Scenario.DEFAULT_BUSY_SAMPLES),
        betas=reader.get(section, "betas", betas, ()),
        snapshots=reader.get(section, "snapshots", positive_int, Scenario.DEFAULT_SNAPSHOTS),
        sample_interval=reader.get(section, "sample_interval", spacing, Scenario.DEFAULT_SAMPLE_INTERVAL),
        covariance_snapshots=reader.get(
            section, "covariance_snapshots", positive_int, Scenario.DEFAULT_COVARIANCE_SNAPSHOTS
        ),
        long_running=reader.get_bool(section, "long_running", False),
        output_dir=reader.get("output", "directory", lambda s: s.strip(), Scenario.DEFAULT_OUTPUT_DIR),
        check=reader.get_bool("output", "check", False),
    )


def parse_config_text(
    text: str,
    path: str = "<config>",
    scenario_name: Optional[str] = None,
) -> Tuple[SystemConfig, Scenario]:
    """
    Parse configuration text

    Args:
        text: File contents
        path: Name used in diagnostics
        scenario_name: Overrides [scenario] name when given

    Returns:
        (SystemConfig, Scenario)

    Raises:
        ConfigError: On syntax errors, unknown sections or keys, and invalid values
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("entries must follow a [section] header", path=path, line=e.lineno) from e
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", path=path, line=e.lineno) from e
    except configparser.DuplicateOptionError as e:
        raise ConfigError("duplicate key", path=path, line=e.lineno, section=e.section, key=e.option) from e
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("malformed line", path=path, line=line) from e

    lines = _key_lines(text)
    reader = _Reader(parser, path, lines)
    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(
                f"unknown section; expected one of {', '.join(_SECTION_KEYS)}",
                path=path,
                line=lines.get((section, "")),
                section=section,
            )
        if section == "service":
            continue
        for key in parser.options(section):
            if key not in _SECTION_KEYS[section]:
                raise reader.error(section, key, "unknown key")

    service = _read_service(reader)
    system = _read_system(reader, service)
    scenario = _read_scenario(reader, system, scenario_name)
    logger.debug("parsed %s: %s, scenario %s", path, system.describe(), scenario.name)
    return system, scenario


def parse_config(path: str, scenario_name: Optional[str] = None) -> Tuple[SystemConfig, Scenario]:
    """
    Read and validate a configuration file

    Raises:
        ConfigError: If the file is missing or invalid
    """
    if not os.path.isfile(path):
        raise ConfigError("configuration file does not exist", path=path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as e:
        raise ConfigError(f"cannot read file: {e}", path=path) from e
    return parse_config_text(text, path=path, scenario_name=scenario_name)


def default_config(scenario_name: str) -> Tuple[SystemConfig, Scenario]:
    """Configuration used when no file is given."""
    return parse_config_text("", path="<defaults>", scenario_name=scenario_name)
