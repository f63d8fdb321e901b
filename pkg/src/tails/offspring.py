"""
Offspring distributions: validation, branching parameters, generating
function, extinction probability and pruning of finite subtrees
"""

import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial

from .constants import (
    EXTINCTION_MAX_ITERATIONS,
    EXTINCTION_TOLERANCE,
    GEOMETRIC_TAIL_CUTOFF,
    PROB_SUM_TOLERANCE,
    PRUNE_COEFFICIENT_FLOOR,
)
from .exceptions import (
    BoettcherDegenerateError,
    DegenerateDistributionError,
    NoConvergenceError,
    ValidationError,
)

logger = logging.getLogger(__name__)

_PMF_PATTERN = re.compile(r"^\s*pmf\s*:(.*)$", re.IGNORECASE)
_GEOMETRIC_PATTERN = re.compile(r"^\s*geometric\s*:\s*(\S+)\s*$", re.IGNORECASE)


class DistributionKind(str, Enum):
    FINITE_PMF = "finite_pmf"
    GEOMETRIC = "geometric"


class Regime(str, Enum):
    SCHROEDER = "Schroeder"
    BOETTCHER = "Boettcher"


@dataclass(frozen=True)
class OffspringDistribution:
    """Law of the offspring count N

    finite_pmf keeps p_0..p_K explicitly; geometric keeps the parameter a with
    p_k = (1 - a) a^(k-1) for k >= 1.
    """

    kind: DistributionKind
    probs: Tuple[float, ...] = ()
    geo_param: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind is DistributionKind.GEOMETRIC:
            if self.geo_param is None or not 0.0 < self.geo_param < 1.0:
                raise ValidationError(
                    f"Geometric parameter must lie in (0, 1), got {self.geo_param}"
                )
            return
        if not self.probs:
            raise ValidationError("A finite pmf needs at least one probability")
        if any(p < 0.0 or not math.isfinite(p) for p in self.probs):
            raise ValidationError("Probabilities must be finite and non-negative")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > PROB_SUM_TOLERANCE:
            raise ValidationError(f"Probabilities sum to {total!r}, not 1")
        if self.probs[-1] == 0.0:
            raise ValidationError("Trailing zero probabilities are not allowed")

    @classmethod
    def finite(cls, probs: Dict[int, float]) -> "OffspringDistribution":
        """Build a finite pmf from a {support point: probability} map"""
        if not probs:
            raise ValidationError("Empty support")
        if min(probs) < 0:
            raise ValidationError("Support points must be non-negative")
        positive = [k for k, p in probs.items() if p > 0.0]
        support_max = max(positive) if positive else 0
        dense = [0.0] * (support_max + 1)
        for k, p in probs.items():
            if k <= support_max:
                dense[k] += float(p)
        return cls(DistributionKind.FINITE_PMF, tuple(dense))

    @classmethod
    def geometric(cls, a: float) -> "OffspringDistribution":
        return cls(DistributionKind.GEOMETRIC, geo_param=float(a))

    @classmethod
    def parse(cls, text: str) -> "OffspringDistribution":
        """
        Parse `pmf: 0:0.25, 2:0.75` or `geometric: 0.5`

        Raises:
            ValidationError: If the text matches neither form
        """
        geometric = _GEOMETRIC_PATTERN.match(text)
        if geometric:
            try:
                return cls.geometric(float(geometric.group(1)))
            except ValueError as e:
                raise ValidationError(f"Invalid geometric parameter in {text!r}") from e

        pmf = _PMF_PATTERN.match(text)
        if not pmf:
            raise ValidationError(f"Unrecognized distribution spec {text!r}")
        probs: Dict[int, float] = {}
        for item in pmf.group(1).split(","):
            if not item.strip():
                continue
            try:
                key, value = item.split(":")
                k = int(key.strip())
                probs[k] = probs.get(k, 0.0) + float(value.strip())
            except ValueError as e:
                raise ValidationError(f"Invalid pmf entry {item.strip()!r}") from e
        return cls.finite(probs)

    def describe(self) -> str:
        if self.kind is DistributionKind.GEOMETRIC:
            return f"geometric: {self.geo_param!r}"
        terms = (f"{k}:{p!r}" for k, p in enumerate(self.probs) if p > 0.0)
        return "pmf: " + ", ".join(terms)

    @property
    def mean(self) -> float:
        if self.kind is DistributionKind.GEOMETRIC:
            return 1.0 / (1.0 - self.geo_param)  # type: ignore[operator]
        return math.fsum(k * p for k, p in enumerate(self.probs))

    def prob(self, k: int) -> float:
        if k < 0:
            return 0.0
        if self.kind is DistributionKind.GEOMETRIC:
            a = self.geo_param
            return 0.0 if k == 0 else (1.0 - a) * a ** (k - 1)  # type: ignore[operator]
        return self.probs[k] if k < len(self.probs) else 0.0

    @property
    def min_support(self) -> int:
        if self.kind is DistributionKind.GEOMETRIC:
            return 1
        return next(k for k, p in enumerate(self.probs) if p > 0.0)

    @property
    def is_point_mass(self) -> bool:
        if self.kind is DistributionKind.GEOMETRIC:
            return False
        return sum(1 for p in self.probs if p > 0.0) == 1

    def truncated_probs(self) -> np.ndarray:
        """Dense p_0..p_K; geometric laws are cut once the tail mass is below 1e-14"""
        if self.kind is DistributionKind.FINITE_PMF:
            return np.array(self.probs, dtype=float)
        a = float(self.geo_param)  # type: ignore[arg-type]
        # tail beyond K is a^K
        k_max = max(1, int(math.ceil(math.log(GEOMETRIC_TAIL_CUTOFF) / math.log(a))))
        probs = np.zeros(k_max + 1)
        k = np.arange(1, k_max + 1)
        probs[1:] = (1.0 - a) * a ** (k - 1)
        return probs / probs.sum()

    def sample_sums(self, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Total offspring of `counts` individuals, vectorized over the counts array"""
        counts = np.asarray(counts, dtype=np.int64)
        if self.kind is DistributionKind.GEOMETRIC:
            # each child count is 1 + Geometric failures with success prob 1 - a
            totals = counts.copy()
            active = counts > 0
            if np.any(active):
                success = 1.0 - float(self.geo_param)  # type: ignore[arg-type]
                totals[active] += rng.negative_binomial(counts[active], success)
            return totals
        probs = np.array(self.probs, dtype=float)
        draws = rng.multinomial(counts, probs / probs.sum())
        return draws @ np.arange(len(probs), dtype=np.int64)


@dataclass(frozen=True)
class BranchingParams:
    mu: float
    p1: float
    nu: int
    regime: Regime
    p_nu: float
    tau: Optional[float] = None
    beta: Optional[float] = None
    beta_ratio: Optional[float] = None


def derive_params(dist: OffspringDistribution) -> BranchingParams:
    """
    Derive the regime and tail exponents of the martingale limit

    Args:
        dist: Offspring law with p_0 = 0 and mean above one

    Returns:
        BranchingParams with tau (Schroeder) or beta and beta/(1-beta) (Boettcher)

    Raises:
        DegenerateDistributionError: For point masses, mu <= 1 or p_0 > 0
        BoettcherDegenerateError: When the minimal offspring equals the mean
    """
    if dist.prob(0) > 0.0:
        raise DegenerateDistributionError("p_0 > 0: prune the distribution first")
    mu = dist.mean
    nu = dist.min_support
    if dist.is_point_mass:
        if nu >= 2:
            raise BoettcherDegenerateError(f"Point mass at {nu}: W is deterministic")
        raise DegenerateDistributionError(
            f"Point mass at {nu}: process is not supercritical"
        )
    if mu <= 1.0:
        raise DegenerateDistributionError(f"Mean offspring {mu!r} is not above 1")

    p1 = dist.prob(1)
    if dist.kind is DistributionKind.GEOMETRIC:
        # mu = 1/(1-a) and p1 = 1-a share one logarithm, so tau is exactly 1
        log_p1 = math.log1p(-dist.geo_param)  # type: ignore[operator]
        log_mu = -log_p1
    else:
        log_p1 = math.log(p1) if p1 > 0.0 else -math.inf
        log_mu = math.log(mu)

    if p1 > 0.0:
        return BranchingParams(
            mu=mu, p1=p1, nu=1, regime=Regime.SCHROEDER, p_nu=p1, tau=-log_p1 / log_mu
        )

    if math.isclose(float(nu), mu, rel_tol=0.0, abs_tol=1e-12):
        raise BoettcherDegenerateError(f"nu = mu = {nu}: W is deterministic")
    beta = math.log(nu) / log_mu
    return BranchingParams(
        mu=mu,
        p1=0.0,
        nu=nu,
        regime=Regime.BOETTCHER,
        p_nu=dist.prob(nu),
        beta=beta,
        beta_ratio=beta / (1.0 - beta),
    )


def pgf_eval(dist: OffspringDistribution, s: float) -> float:
    """Probability generating function f(s) = sum p_k s^k"""
    if not 0.0 <= s <= 1.0:
        raise ValidationError(f"pgf argument must lie in [0, 1], got {s}")
    if dist.kind is DistributionKind.GEOMETRIC:
        a = float(dist.geo_param)  # type: ignore[arg-type]
        return (1.0 - a) * s / (1.0 - a * s)
    return float(Polynomial(dist.probs)(s))


def extinction_probability(dist: OffspringDistribution) -> float:
    """
    Smallest fixed point of f(s) = s, by iterating s <- f(s) from 0

    Raises:
        DegenerateDistributionError: If the process is not supercritical
        NoConvergenceError: If the iteration cap is reached
    """
    if dist.mean <= 1.0:
        raise DegenerateDistributionError(
            f"Mean offspring {dist.mean!r} is not above 1"
        )
    s = 0.0
    for _ in range(EXTINCTION_MAX_ITERATIONS):
        s_next = pgf_eval(dist, s)
        if abs(s_next - s) < EXTINCTION_TOLERANCE:
            return s_next
        s = s_next
    logger.error(f"Extinction iteration did not converge for {dist.describe()}")
    raise NoConvergenceError("Extinction probability iteration hit its cap")


def prune(dist: OffspringDistribution) -> OffspringDistribution:
    """
    Offspring law of the tree of surviving lines

    Uses f_hat(s) = [f(q + (1-q)s) - q] / (1-q), expanded as a polynomial.
    """
    q = extinction_probability(dist)
    if q == 0.0:
        return dist
    if dist.kind is DistributionKind.GEOMETRIC:
        return dist  # geometric laws here have p_0 = 0

    composed = Polynomial(dist.probs)(Polynomial([q, 1.0 - q]))
    coefficients = composed.coef.copy()
    coefficients[0] -= q
    coefficients /= 1.0 - q
    coefficients[0] = 0.0
    coefficients[coefficients < PRUNE_COEFFICIENT_FLOOR] = 0.0
    coefficients /= coefficients.sum()
    logger.debug(f"Pruned {dist.describe()} with extinction probability {q:.6g}")
    return OffspringDistribution.finite(
        {k: float(p) for k, p in enumerate(coefficients) if p > 0.0}
    )


def embedded_walk_offspring(
    tail_cutoff: float = GEOMETRIC_TAIL_CUTOFF,
) -> OffspringDistribution:
    """
    Number of fine steps made during one coarse step of the embedded walk

    A coarse step ends when the fine walk first moves two sites away; every
    pair of fine steps ends it with probability 1/2, so the count is 2k with
    probability 2^-k.
    """
    probs: Dict[int, float] = {}
    k = 1
    while 0.5**k >= tail_cutoff:
        probs[2 * k] = 0.5**k
        k += 1
    total = math.fsum(probs.values())
    return OffspringDistribution.finite({j: p / total for j, p in probs.items()})
