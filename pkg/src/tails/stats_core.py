"""
Seeded random streams, Bernoulli estimates with Wilson intervals, exponent
regressions and the two-sample Kolmogorov-Smirnov statistic
"""

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike
from scipy import stats

from .constants import DEFAULT_CONFIDENCE, KS_THRESHOLD_99, Z_95
from .exceptions import DegenerateInputError, ValidationError

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


class StreamTag(IntEnum):
    """Leading sub-key of every sampler's streams

    Estimates combined in one experiment draw from disjoint streams even when
    their other keys (level, n, depth) coincide.
    """

    SAMPLE = 0
    PILOT = 1
    CLEARING = 2
    SCALING = 3
    SINGLE_STEP = 4
    MINIMAL_CROSSING = 5
    STRATEGY = 6
    PHASE_ONE = 7
    DISJOINT = 8
    GREEN = 9
    EXIT_PROBE = 10
    GW_MC = 11
    GW_CONDITIONED = 12


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by (seed, stream_id)

    Streams with distinct stream ids are derived from independent branches of
    one SeedSequence, so work items never share generator state.
    """

    seed: int
    stream_id: int = 0
    sub_key: Tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream_id < 0:
            raise ValidationError("seed and stream_id must be non-negative")
        sub_key = tuple(int(k) for k in self.sub_key)
        object.__setattr__(self, "sub_key", sub_key)
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *sub_key)
        )
        generator = np.random.Generator(np.random.PCG64(sequence))
        object.__setattr__(self, "generator", generator)

    def child(self, index: int) -> "RngStream":
        """Stream for sub-item `index` of this stream's work item"""
        return RngStream(self.seed, self.stream_id, self.sub_key + (index,))


@dataclass(frozen=True)
class BernoulliEstimate:
    successes: int
    trials: int
    p_hat: float
    ci_low: float
    ci_high: float
    confidence: float = DEFAULT_CONFIDENCE

    def merge(self, other: "BernoulliEstimate") -> "BernoulliEstimate":
        """Pool two estimates by adding successes and trials"""
        if not math.isclose(self.confidence, other.confidence):
            raise ValidationError("Cannot merge estimates at different confidences")
        return wilson_interval(
            self.successes + other.successes,
            self.trials + other.trials,
            self.confidence,
        )


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    slope_stderr: float
    r_squared: float
    n_points: int


def _z_value(confidence: float) -> float:
    if math.isclose(confidence, DEFAULT_CONFIDENCE):
        return Z_95
    return float(stats.norm.ppf(0.5 + confidence / 2.0))


def wilson_interval(
    successes: int, trials: int, confidence: float = DEFAULT_CONFIDENCE
) -> BernoulliEstimate:
    """
    Wilson score interval for a binomial proportion

    Args:
        successes: Number of successes
        trials: Number of trials, at least one
        confidence: Two-sided confidence level in (0, 1)

    Returns:
        BernoulliEstimate with the point estimate and interval

    Raises:
        ValidationError: If the counts or the level are invalid
    """
    if trials < 1:
        raise ValidationError(f"trials must be at least 1, got {trials}")
    if not 0 <= successes <= trials:
        raise ValidationError(f"successes must lie in [0, {trials}], got {successes}")
    if not 0.0 < confidence < 1.0:
        raise ValidationError(f"confidence must lie in (0, 1), got {confidence}")

    z = _z_value(confidence)
    p_hat = successes / trials
    z2 = z * z
    denominator = 1.0 + z2 / trials
    center = (p_hat + z2 / (2.0 * trials)) / denominator
    spread = p_hat * (1.0 - p_hat) / trials + z2 / (4.0 * trials * trials)
    margin = z * math.sqrt(spread) / denominator

    ci_low = 0.0 if successes == 0 else max(0.0, center - margin)
    ci_high = 1.0 if successes == trials else min(1.0, center + margin)
    return BernoulliEstimate(
        successes=successes,
        trials=trials,
        p_hat=p_hat,
        ci_low=min(ci_low, p_hat),
        ci_high=max(ci_high, p_hat),
        confidence=confidence,
    )


def estimate_from_flags(
    flags: ArrayLike, confidence: float = DEFAULT_CONFIDENCE
) -> BernoulliEstimate:
    """Wilson estimate from an array of boolean outcomes"""
    outcomes = np.asarray(flags, dtype=bool)
    return wilson_interval(int(outcomes.sum()), int(outcomes.size), confidence)


def merge_estimates(estimates: Sequence[BernoulliEstimate]) -> BernoulliEstimate:
    if not estimates:
        raise ValidationError("Nothing to merge")
    merged = estimates[0]
    for estimate in estimates[1:]:
        merged = merged.merge(estimate)
    return merged


def pool_counts(successes: Sequence[int], trials: Sequence[int]) -> BernoulliEstimate:
    """Merged Wilson estimate over per-chunk (successes, trials) counts"""
    return merge_estimates([wilson_interval(s, t) for s, t in zip(successes, trials)])


def _linear_fit(
    x: np.ndarray, y: np.ndarray, weights: Optional[np.ndarray]
) -> RegressionFit:
    if np.ptp(x) == 0.0:
        raise DegenerateInputError("All abscissae are equal; slope is undefined")

    n_points = int(x.size)
    if weights is None:
        result = stats.linregress(x, y)
        slope = float(result.slope)
        intercept = float(result.intercept)
        stderr = float(result.stderr)
        residuals = y - (intercept + slope * x)
        ss_res = float(np.sum(residuals**2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
    else:
        # Weighted least squares, stderr scaled by the weighted residual variance
        w = weights / weights.sum()
        x_bar = float(np.sum(w * x))
        y_bar = float(np.sum(w * y))
        sxx = float(np.sum(w * (x - x_bar) ** 2))
        slope = float(np.sum(w * (x - x_bar) * (y - y_bar))) / sxx
        intercept = y_bar - slope * x_bar
        residuals = y - (intercept + slope * x)
        ss_res = float(np.sum(w * residuals**2))
        ss_tot = float(np.sum(w * (y - y_bar) ** 2))
        dof = max(n_points - 2, 1)
        stderr = math.sqrt(ss_res / (dof * sxx))

    scale = max(1.0, float(np.max(np.abs(y))))
    if ss_res <= (1e-12 * scale) ** 2 * n_points:
        stderr = 0.0
        r_squared = 1.0
    else:
        r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 0.0
    return RegressionFit(
        slope=slope,
        intercept=float(intercept),
        slope_stderr=stderr,
        r_squared=min(1.0, max(0.0, r_squared)),
        n_points=n_points,
    )


def _validate_points(points: Sequence[Point]) -> Tuple[np.ndarray, np.ndarray]:
    if len(points) < 3:
        raise ValidationError(f"At least 3 points are required, got {len(points)}")
    eps = np.array([p[0] for p in points], dtype=float)
    prob = np.array([p[1] for p in points], dtype=float)
    if np.any(eps <= 0.0):
        raise ValidationError("All epsilon values must be positive")
    return eps, prob


def fit_power_law(
    points: Sequence[Point], weights: Optional[Sequence[float]] = None
) -> RegressionFit:
    """
    Least-squares fit of log(prob) against log(epsilon)

    Args:
        points: (epsilon, probability) pairs, probabilities in (0, 1)
        weights: Optional regression weights, e.g. 1 / CI width squared

    Returns:
        RegressionFit whose slope estimates the power-law exponent
    """
    eps, prob = _validate_points(points)
    if np.any(prob <= 0.0) or np.any(prob >= 1.0):
        raise ValidationError("Probabilities must lie strictly between 0 and 1")
    w = None if weights is None else np.asarray(weights, dtype=float)
    return _linear_fit(np.log(eps), np.log(prob), w)


def fit_stretched_exponent(
    points: Sequence[Point], weights: Optional[Sequence[float]] = None
) -> RegressionFit:
    """
    Least-squares fit of log(-log prob) against log(epsilon)

    Only probabilities below 1/e are admissible so that -log(prob) > 1.
    """
    eps, prob = _validate_points(points)
    if np.any(prob <= 0.0):
        raise ValidationError("Probabilities must be positive")
    unstable = prob >= math.exp(-1.0)
    if np.any(unstable):
        logger.warning(
            f"{int(unstable.sum())} points have probability >= 1/e; fit unstable"
        )
        raise ValidationError("Stretched fit needs probabilities below 1/e")
    w = None if weights is None else np.asarray(weights, dtype=float)
    return _linear_fit(np.log(eps), np.log(-np.log(prob)), w)


def fit_log_linear(points: Sequence[Point]) -> RegressionFit:
    """Least-squares fit of log(prob) against x"""
    x, prob = _validate_points(points)
    if np.any(prob <= 0.0):
        raise ValidationError("Probabilities must be positive")
    return _linear_fit(x, np.log(prob), None)


def usable_points(points: Sequence[Point], upper: float = 1.0) -> List[Point]:
    """Drop points whose probability is 0 or at least `upper`, logging the count"""
    kept = [(e, p) for e, p in points if 0.0 < p < upper]
    dropped = len(points) - len(kept)
    if dropped:
        logger.warning(f"Dropped {dropped} points outside (0, {upper:.4g}) from fit")
    return kept


def ks_statistic(sample_a: ArrayLike, sample_b: ArrayLike) -> float:
    """Two-sample Kolmogorov-Smirnov statistic"""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValidationError("KS statistic needs two nonempty samples")
    return float(stats.ks_2samp(a, b).statistic)


def ks_against_cdf(sample: ArrayLike, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """One-sample KS distance between a sample and an analytic CDF"""
    x = np.asarray(sample, dtype=float)
    if x.size == 0:
        raise ValidationError("KS statistic needs a nonempty sample")
    return float(stats.kstest(x, cdf).statistic)


def ks_threshold(n_a: int, n_b: int) -> float:
    """Two-sample KS 99% critical value 1.63 * sqrt((n_a + n_b) / (n_a * n_b))"""
    return KS_THRESHOLD_99 * math.sqrt((n_a + n_b) / (n_a * n_b))
