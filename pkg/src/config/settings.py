"""
Experiment configuration: `key = value` files, environment defaults and the
hash written into every CSV footer
"""

import hashlib
import io
import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from dotenv.parser import parse_stream

from ..tails.constants import (
    DEFAULT_BUDGET,
    DEFAULT_LEVEL,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    DEFAULT_TOLERANCE,
)
from ..tails.exceptions import ConfigError

logger = logging.getLogger(__name__)

ENV_SEED = "SMALLVALUE_SEED"
ENV_THREADS = "SMALLVALUE_THREADS"

# Keys that change where or how fast a run happens, not what it computes
_UNHASHED = ("threads", "out")


def _float_list(text: str) -> Tuple[float, ...]:
    values = tuple(float(part) for part in text.split(",") if part.strip())
    if not values:
        raise ValueError("empty list")
    return values


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError("must be non-negative")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError("must be at least 1")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0.0:
        raise ValueError("must be positive")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """Every setting an experiment run depends on"""

    seed: int = DEFAULT_SEED
    threads: int = DEFAULT_THREADS
    out: Optional[str] = None
    budget: int = DEFAULT_BUDGET
    level: int = DEFAULT_LEVEL
    distribution: Optional[str] = None
    method: Optional[str] = None
    iterations: Optional[int] = None
    depth: Optional[int] = None
    epsilons: Optional[Tuple[float, ...]] = None
    m: Optional[int] = None
    q: Optional[Tuple[float, ...]] = None
    stop_rule: Optional[str] = None
    horizon: Optional[float] = None
    eta: Optional[int] = None
    eps_site: Optional[int] = None
    orientation: Optional[Tuple[int, ...]] = None
    n: Optional[int] = None
    fine_offset: Optional[int] = None
    a_values: Optional[Tuple[float, ...]] = None
    x_scale: Optional[float] = None
    side: Optional[str] = None
    m_walks: Optional[int] = None
    phase_radius: Optional[float] = None
    grid_geometric: Optional[int] = None
    grid_linear: Optional[int] = None
    tolerance: float = DEFAULT_TOLERANCE

    def merged(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with every non-None override applied"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def items(self) -> List[Tuple[str, Any]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


PARSERS: Dict[str, Callable[[str], Any]] = {
    "seed": _non_negative_int,
    "threads": _positive_int,
    "out": str,
    "budget": _positive_int,
    "level": _non_negative_int,
    "distribution": str,
    "method": str,
    "iterations": _positive_int,
    "depth": _positive_int,
    "epsilons": _float_list,
    "m": _positive_int,
    "q": _float_list,
    "stop_rule": str,
    "horizon": _positive_float,
    "eta": _positive_int,
    "eps_site": _positive_int,
    "orientation": _int_list,
    "n": _non_negative_int,
    "fine_offset": _non_negative_int,
    "a_values": _float_list,
    "x_scale": _positive_float,
    "side": str,
    "m_walks": _positive_int,
    "phase_radius": _positive_float,
    "grid_geometric": _positive_int,
    "grid_linear": _positive_int,
    "tolerance": _positive_float,
}


def _line_of(binding: Any) -> int:
    # the parser marks a binding where its leading blank lines begin
    text = binding.original.string
    leading = text[: len(text) - len(text.lstrip())]
    return int(binding.original.line) + leading.count("\n")


def parse_values(text: str) -> Dict[str, Any]:
    """
    Parse `key = value` lines into typed values

    Raises:
        ConfigError: Listing every unknown key, malformed line and bad value
    """
    values: Dict[str, Any] = {}
    problems: List[str] = []
    for binding in parse_stream(io.StringIO(text)):
        line = _line_of(binding)
        if binding.error:
            original = binding.original.string.strip()
            problems.append(f"line {line}: cannot parse {original!r}")
            continue
        if binding.key is None:
            continue
        key = binding.key.strip().lower().replace("-", "_")
        if key not in PARSERS:
            problems.append(f"line {line}: unknown key {binding.key!r}")
            continue
        if binding.value is None or not binding.value.strip():
            problems.append(f"line {line}: missing value for {key!r}")
            continue
        try:
            values[key] = PARSERS[key](binding.value.strip())
        except ValueError as e:
            problems.append(
                f"line {line}: bad value {binding.value!r} for {key!r} ({str(e)})"
            )

    if problems:
        for problem in problems:
            logger.error(f"Config problem: {problem}")
        raise ConfigError(f"Invalid configuration: {'; '.join(problems)}", problems)
    return values


def parse_config(
    text: str, base: Optional[ExperimentConfig] = None
) -> ExperimentConfig:
    """
    Typed configuration from `key = value` text with `#` comments

    Args:
        text: Config file contents
        base: Settings the file overrides; defaults when omitted

    Raises:
        ConfigError: If any line is unknown or invalid
    """
    return (base or ExperimentConfig()).merged(parse_values(text))


def load_config(path: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        logger.error(f"Cannot read config {path}: {str(e)}")
        raise ConfigError(f"Cannot read config file {path}", [str(e)]) from e
    return parse_config(text, base)


def config_from_env(environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Defaults with SMALLVALUE_SEED and SMALLVALUE_THREADS applied"""
    env = os.environ if environ is None else environ
    overrides: Dict[str, Any] = {}
    problems = []
    for key, name in (("seed", ENV_SEED), ("threads", ENV_THREADS)):
        raw = env.get(name)
        if raw is None or not raw.strip():
            continue
        try:
            overrides[key] = PARSERS[key](raw.strip())
        except ValueError as e:
            problems.append(f"{name}: bad value {raw!r} ({str(e)})")
    if problems:
        raise ConfigError(f"Invalid environment: {'; '.join(problems)}", problems)
    return ExperimentConfig().merged(overrides)


def config_hash(config: ExperimentConfig, command: str) -> str:
    """SHA-256 of the canonical key=value rendering minus threads and out"""
    lines = [f"command={command}"]
    for key, value in sorted(config.items()):
        if key in _UNHASHED:
            continue
        lines.append(f"{key}={value!r}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
