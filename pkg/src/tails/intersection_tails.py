"""
Intersection local times of embedded walks

Mutual functionals X = 2^-n sum_x prod_j L_j(x)^q_j over m independent
walks, the self-intersection functional of one walk, their small-value tail
experiments and the strategy measurements that bracket them.
"""

import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.parallel import SERIAL, WorkItem, WorkQueue, split_budget
from .brownian_paths import (
    EmbeddedWalk,
    LocalTimeField,
    StopRule,
    _run_until_barriers,
    local_time_field,
    simulate_barrier_walk,
    simulate_conditioned_segment,
    simulate_exit_walk,
    simulate_fixed_time_walk,
    walk_segments,
)
from .constants import (
    DEFAULT_FINE_OFFSET,
    DISCRETIZATION_FLOOR_QUANTILE,
    QUANTILE_ANCHORS,
    STRETCHED_MIN_SUCCESSES,
)
from .exceptions import (
    InsufficientDataError,
    LevelMismatchError,
    NoFeasibleTauError,
    ValidationError,
)
from .gw_tails import TailEstimate, TailMethod, TailPoint, default_tau_grid
from .stats_core import (
    BernoulliEstimate,
    RegressionFit,
    RngStream,
    StreamTag,
    fit_power_law,
    fit_stretched_exponent,
    ks_statistic,
    ks_threshold,
    pool_counts,
    usable_points,
    wilson_interval,
)

logger = logging.getLogger(__name__)

_STOP_RULES = (StopRule.EXIT_UNIT_INTERVAL, StopRule.FIXED_STEPS)


@dataclass(frozen=True)
class IntersectionFunctional:
    """
    m walks, their exponents q_j >= 1 and the rule that stops them

    The exit rule runs each walk until it leaves (-1, 1); the fixed-steps
    rule runs it for floor(horizon * 4^level) steps.
    """

    m: int
    q_exponents: Tuple[float, ...]
    stop_rule: StopRule = StopRule.EXIT_UNIT_INTERVAL
    horizon: float = 1.0

    def __post_init__(self) -> None:
        exponents = tuple(float(q) for q in self.q_exponents)
        object.__setattr__(self, "q_exponents", exponents)
        object.__setattr__(self, "stop_rule", StopRule(self.stop_rule))
        if self.m < 1:
            raise ValidationError(f"m must be at least 1, got {self.m}")
        if len(self.q_exponents) != self.m:
            raise ValidationError(
                f"Expected {self.m} exponents, got {len(self.q_exponents)}"
            )
        if any(q < 1.0 for q in self.q_exponents):
            raise ValidationError(
                f"Every q_j must be at least 1, got {list(self.q_exponents)}"
            )
        if self.stop_rule not in _STOP_RULES:
            raise ValidationError(f"Unsupported stop rule {self.stop_rule.value}")
        if self.horizon <= 0.0:
            raise ValidationError(f"horizon must be positive, got {self.horizon}")

    @property
    def q_total(self) -> float:
        return float(sum(self.q_exponents))

    @property
    def exponent_target(self) -> float:
        """2/(1+q) for m >= 2; the stretched exponent 1/q for one walk"""
        if self.m == 1:
            return 1.0 / self.q_total
        return 2.0 / (1.0 + self.q_total)

    @property
    def slope_target(self) -> float:
        """Expected regression slope: the power-law slope or minus the stretched one"""
        return -self.exponent_target if self.m == 1 else self.exponent_target

    def labels(self, level: int) -> Dict[str, str]:
        return {
            "m": str(self.m),
            "q_list": ";".join(f"{q:g}" for q in self.q_exponents),
            "stop_rule": self.stop_rule.value,
            "level": str(level),
        }


@dataclass(frozen=True)
class StartConfiguration:
    """Orientation set M (walks heading to +1) and per-walk start sites"""

    orientation: FrozenSet[int]
    start_sites: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "orientation", frozenset(self.orientation))
        object.__setattr__(self, "start_sites", tuple(int(s) for s in self.start_sites))
        m = len(self.start_sites)
        if any(not 1 <= j <= m for j in self.orientation):
            raise ValidationError(
                f"Orientation indices must lie in 1..{m}, "
                f"got {sorted(self.orientation)}"
            )

    @property
    def m(self) -> int:
        return len(self.start_sites)

    def require_proper(self) -> None:
        if not self.orientation or len(self.orientation) == self.m:
            raise ValidationError(
                "Orientation set must be a proper, nonempty subset of the walks"
            )

    def sign(self, j: int) -> int:
        """+1 for walks in M, -1 otherwise (j counts from 1)"""
        return 1 if j in self.orientation else -1

    @classmethod
    def symmetric(
        cls, m: int, orientation: Sequence[int], offset: int
    ) -> "StartConfiguration":
        """Walks in M start at +offset, the others at -offset"""
        chosen = frozenset(orientation)
        sites = tuple(offset if j in chosen else -offset for j in range(1, m + 1))
        return cls(orientation=chosen, start_sites=sites)


# Functionals


def mutual_ilt(fields: Sequence[LocalTimeField], q_exponents: Sequence[float]) -> float:
    """
    Riemann sum 2^-n sum_x prod_j L_j(x)^q_j over the common support

    Raises:
        LevelMismatchError: If the fields live on different levels
    """
    if not fields:
        raise ValidationError("mutual_ilt needs at least one field")
    if len(fields) != len(q_exponents):
        raise ValidationError(
            f"Got {len(fields)} fields and {len(q_exponents)} exponents"
        )
    levels = {f.level for f in fields}
    if len(levels) > 1:
        raise LevelMismatchError(f"Fields live on different levels {sorted(levels)}")

    low = max(int(f.sites[0]) for f in fields)
    high = min(int(f.sites[-1]) for f in fields)
    if low > high:
        return 0.0
    product = np.ones(high - low + 1)
    for f, q in zip(fields, q_exponents):
        start = low - int(f.sites[0])
        product *= f.values[start : start + product.size] ** q
    return float(product.sum()) * fields[0].spacing


def self_ilt(walk: EmbeddedWalk, q: float) -> float:
    return mutual_ilt([local_time_field(walk)], [q])


def segment_functional(visits: np.ndarray, level: int, q: float) -> float:
    """2^-n sum_x (2^-n visits(x))^q for one segment's visit counts"""
    spacing = 2.0**-level
    return float(np.sum((np.asarray(visits, dtype=float) * spacing) ** q)) * spacing


# Sampling


def _simulate_walk(
    functional: IntersectionFunctional,
    level: int,
    start_site: int,
    rng: RngStream,
    scale: int,
) -> EmbeddedWalk:
    if functional.stop_rule is StopRule.FIXED_STEPS:
        horizon = functional.horizon * scale * scale
        return simulate_fixed_time_walk(level, start_site, horizon, rng)
    if scale == 1:
        return simulate_exit_walk(level, start_site, rng)
    bound = scale << level
    return simulate_barrier_walk(level, start_site, bound, -bound, rng)


def _functional_work(
    functional: IntersectionFunctional,
    level: int,
    seed: int,
    sub_key: Tuple[int, ...],
    start_sites: Tuple[int, ...],
    scale: int,
    item: WorkItem,
) -> np.ndarray:
    rng = RngStream(seed, item.stream_id, sub_key)
    samples = np.empty(item.n_samples)
    for i in range(item.n_samples):
        fields = [
            local_time_field(_simulate_walk(functional, level, site, rng, scale))
            for site in start_sites
        ]
        samples[i] = mutual_ilt(fields, functional.q_exponents)
    return samples


def sample_functional(
    functional: IntersectionFunctional,
    level: int,
    n_samples: int,
    seed: int,
    start_sites: Optional[Sequence[int]] = None,
    scale: int = 1,
    sub_key: Tuple[int, ...] = (StreamTag.SAMPLE,),
    queue: WorkQueue = SERIAL,
) -> np.ndarray:
    """
    Monte Carlo draws of the discrete functional X_hat

    Args:
        functional: Walk count, exponents and stop rule
        level: Dyadic level n of the walks
        n_samples: Number of draws
        seed: Seed for all streams
        start_sites: Start site per walk, all at the origin by default
        scale: Integer factor eta; exit walks leave (-eta, eta), fixed-time
            walks run eta^2 times longer
        sub_key: Stream sub-key separating independent sample sets

    Returns:
        Draws in work-item order
    """
    if level < 0:
        raise ValidationError(f"level must be non-negative, got {level}")
    if scale < 1:
        raise ValidationError(f"scale must be at least 1, got {scale}")
    sites = tuple(start_sites) if start_sites is not None else (0,) * functional.m
    if len(sites) != functional.m:
        raise ValidationError(f"Expected {functional.m} start sites, got {len(sites)}")
    items = split_budget(n_samples)
    work = partial(
        _functional_work, functional, level, seed, tuple(sub_key), sites, scale
    )
    return np.concatenate(queue.map(work, items))


# Tail experiment


def discretization_floor(samples: np.ndarray) -> float:
    """Empirical quantile below which lattice granularity dominates"""
    return float(np.quantile(samples, DISCRETIZATION_FLOOR_QUANTILE))


def quantile_epsilon_grid(
    samples: np.ndarray, anchors: Sequence[float] = QUANTILE_ANCHORS
) -> List[float]:
    """Distinct positive empirical quantiles at the anchors, largest first"""
    if samples.size == 0:
        raise ValidationError("Quantile grid needs a nonempty pilot sample")
    values = np.quantile(samples, sorted(anchors))
    return sorted({float(v) for v in values if v > 0.0}, reverse=True)


def clearing_level(
    functional: IntersectionFunctional,
    eps_grid: Sequence[float],
    start_level: int,
    max_level: int,
    pilot_budget: int,
    seed: int,
    queue: WorkQueue = SERIAL,
) -> int:
    """
    Smallest level in [start_level, max_level] whose pilot floor lies below
    min(eps_grid)

    Raises:
        InsufficientDataError: If no level up to max_level clears the grid
    """
    target = min(eps_grid)
    for level in range(start_level, max_level + 1):
        pilot = sample_functional(
            functional,
            level,
            pilot_budget,
            seed,
            sub_key=(StreamTag.CLEARING, level),
            queue=queue,
        )
        floor = discretization_floor(pilot)
        logger.debug(
            f"Level {level}: discretization floor {floor:.4g} against eps {target:.4g}"
        )
        if floor < target:
            return level
    raise InsufficientDataError(f"No level up to {max_level} clears eps {target:.4g}")


def _fit_tail(
    functional: IntersectionFunctional, points: List[TailPoint]
) -> Tuple[RegressionFit, str]:
    if functional.m >= 2:
        usable = usable_points([(p.epsilon, p.p_hat) for p in points])
        if len(usable) < 3:
            raise InsufficientDataError(f"Only {len(usable)} usable tail points")
        return fit_power_law(usable), "power"

    counted = [
        (p.epsilon, p.p_hat)
        for p in points
        if p.estimate is not None and p.estimate.successes >= STRETCHED_MIN_SUCCESSES
    ]
    usable = usable_points(counted, upper=math.exp(-1.0))
    if len(usable) < 3:
        raise InsufficientDataError(
            f"Only {len(usable)} points with P < 1/e and "
            f"{STRETCHED_MIN_SUCCESSES}+ successes"
        )
    return fit_stretched_exponent(usable), "stretched"


def estimate_tail(
    functional: IntersectionFunctional,
    level: int,
    eps_grid: Optional[Sequence[float]] = None,
    budget: int = 10_000,
    seed: int = 0,
    pilot_budget: Optional[int] = None,
    queue: WorkQueue = SERIAL,
) -> TailEstimate:
    """
    Measure P{X_hat < eps} and fit the small-value exponent

    Without an explicit grid, eps values sit at fixed empirical quantiles
    of an independent pilot run. Points at or below the pilot's
    discretization floor are dropped. Two or more walks get a power-law fit
    targeting 2/(1+q); a single walk gets a stretched fit targeting -1/q.

    Raises:
        InsufficientDataError: If fewer than three usable points remain
    """
    pilot_size = pilot_budget if pilot_budget is not None else max(budget // 4, 1)
    pilot = sample_functional(
        functional, level, pilot_size, seed, sub_key=(StreamTag.PILOT,), queue=queue
    )
    floor = discretization_floor(pilot)
    if eps_grid is None:
        grid = quantile_epsilon_grid(pilot)
    else:
        grid = sorted({float(e) for e in eps_grid}, reverse=True)
        if any(e <= 0.0 for e in grid):
            raise ValidationError("epsilon values must be positive")

    kept = [e for e in grid if e > floor]
    if len(kept) < len(grid):
        logger.warning(
            f"Dropped {len(grid) - len(kept)} eps values below the discretization "
            f"floor {floor:.4g}"
        )
    logger.info(
        f"Intersection tail: m={functional.m}, q={list(functional.q_exponents)}, "
        f"rule {functional.stop_rule.value}, level {level}, {len(kept)} points"
    )

    samples = sample_functional(
        functional, level, budget, seed, sub_key=(StreamTag.SAMPLE,), queue=queue
    )
    points = []
    for eps in kept:
        below = wilson_interval(int(np.count_nonzero(samples < eps)), int(samples.size))
        points.append(TailPoint.from_estimate(eps, below, TailMethod.MC))
    fit, fit_kind = _fit_tail(functional, points)
    return TailEstimate(
        points=points,
        fit=fit,
        target_exponent=functional.slope_target,
        fit_kind=fit_kind,
        extra={"discretization_floor": floor, "sample_mean": float(samples.mean())},
        labels=functional.labels(level),
    )


# Disjointness and scaling


def _disjoint_work(
    orientation: FrozenSet[int],
    m: int,
    offset: int,
    level: int,
    seed: int,
    item: WorkItem,
) -> int:
    rng = RngStream(seed, item.stream_id, (StreamTag.DISJOINT,))
    bound = 1 << level
    hits = 0
    for _ in range(item.n_samples):
        # ranges are [min_j, 1] for walks in M and [-1, max_j] otherwise
        highest_min = -math.inf
        lowest_max = math.inf
        for j in range(1, m + 1):
            # mirrored walks for j outside M; a walk that crosses to -offset
            # overlaps every walk of the other group and cannot separate them
            path, _ = _run_until_barriers(offset, -offset, bound, rng)
            if path[-1] < bound:
                continue
            if j in orientation:
                highest_min = max(highest_min, int(path.min()))
            else:
                lowest_max = min(lowest_max, -int(path.min()))
        hits += int(highest_min > lowest_max)
    return hits


def disjointness_probe(
    configuration: StartConfiguration,
    level: int,
    budget: int,
    seed: int,
    queue: WorkQueue = SERIAL,
) -> BernoulliEstimate:
    """
    Probability that the ranges of m walks up to their first hit of +-1 are disjoint

    Walks in M start at +eps and stop at +1; the others start at -eps and
    stop at -1. The configuration's start sites are +-k with eps = k 2^-level.

    Raises:
        ValidationError: If M is not proper and nonempty or the start sites
            are not symmetric
    """
    configuration.require_proper()
    offsets = {abs(s) for s in configuration.start_sites}
    if len(offsets) != 1 or 0 in offsets:
        raise ValidationError("Disjointness needs start sites +-k with one k >= 1")
    for j, site in enumerate(configuration.start_sites, start=1):
        if site != configuration.sign(j) * abs(site):
            raise ValidationError(
                f"Walk {j} starts on the wrong side for its orientation"
            )
    offset = offsets.pop()
    if offset >= 1 << level:
        raise ValidationError(
            f"Start offset {offset} must lie inside (-2^{level}, 2^{level})"
        )
    logger.info(
        f"Disjointness probe: m={configuration.m}, "
        f"|M|={len(configuration.orientation)}, eps={offset}/2^{level}"
    )

    items = split_budget(budget)
    work = partial(
        _disjoint_work, configuration.orientation, configuration.m, offset, level, seed
    )
    hits = queue.map(work, items)
    return pool_counts(hits, [item.n_samples for item in items])


def disjointness_bounds(m: int, ell: int, epsilon: float) -> Tuple[float, float, float]:
    """
    Lower bound eps^2, upper bound 4 l (m-l) eps^2/(1+eps)^2 and asymptotic
    value 2 l (m-l) eps^2
    """
    if not 0 < ell < m:
        raise ValidationError(f"Need 0 < l < m, got l={ell}, m={m}")
    weight = ell * (m - ell)
    upper = 4.0 * weight * epsilon**2 / (1.0 + epsilon) ** 2
    return epsilon**2, upper, 2.0 * weight * epsilon**2


@dataclass(frozen=True)
class ScalingResult:
    ks: float
    threshold: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return self.ks < self.threshold


def scaling_check(
    functional: IntersectionFunctional,
    eta: int,
    level: int,
    budget: int,
    seed: int,
    queue: WorkQueue = SERIAL,
) -> float:
    """
    KS distance between X_hat for the unit problem and X_hat for the
    eta-scaled problem divided by eta^(1+q)

    eta = 1 reuses the same streams on both sides, so the distance is 0.
    """
    return scaling_result(functional, eta, level, budget, seed, queue).ks


def scaling_result(
    functional: IntersectionFunctional,
    eta: int,
    level: int,
    budget: int,
    seed: int,
    queue: WorkQueue = SERIAL,
) -> ScalingResult:
    if eta < 1 or eta & (eta - 1):
        raise ValidationError(f"eta must be a power of two, got {eta}")
    base = sample_functional(
        functional, level, budget, seed, sub_key=(StreamTag.SCALING, 1), queue=queue
    )
    scaled = sample_functional(
        functional,
        level,
        budget,
        seed,
        scale=eta,
        sub_key=(StreamTag.SCALING, eta),
        queue=queue,
    )
    scaled = scaled / float(eta) ** (1.0 + functional.q_total)
    ks = ks_statistic(base, scaled)
    logger.info(f"Scaling check with eta={eta}: KS {ks:.4f}")
    return ScalingResult(
        ks=ks,
        threshold=ks_threshold(base.size, scaled.size),
        n_samples=int(base.size),
    )


# Self-intersection strategy


def _single_step_work(q: float, level: int, seed: int, item: WorkItem) -> np.ndarray:
    rng = RngStream(seed, item.stream_id, (StreamTag.SINGLE_STEP, level))
    values = np.empty(item.n_samples)
    for i in range(item.n_samples):
        walk = simulate_exit_walk(level, 0, rng)
        visits = walk.visits.copy()
        visits[walk.final_site - walk.min_site] -= 1
        values[i] = segment_functional(visits, level, q)
    return values


def single_step_functionals(
    q: float, level: int, n_samples: int, seed: int, queue: WorkQueue = SERIAL
) -> np.ndarray:
    """
    The functional of one unit crossing, on half-open visits at the given level

    One coarse step of size 2^-n is a unit crossing scaled by 2^-n, so these
    draws equal 2^(n(1+q)) times the single-step functional.
    """
    if q < 1.0:
        raise ValidationError(f"q must be at least 1, got {q}")
    items = split_budget(n_samples)
    return np.concatenate(queue.map(partial(_single_step_work, q, level, seed), items))


def estimate_cq(
    q: float, level: int, budget: int, seed: int, queue: WorkQueue = SERIAL
) -> float:
    """C(q) making C(q) 2^(n(1+q)) times the single-step functional mean one"""
    values = single_step_functionals(q, level, budget, seed, queue)
    mean = float(values.mean())
    if mean <= 0.0:
        raise InsufficientDataError("Single-step functional has zero mean")
    return 1.0 / mean


@dataclass(frozen=True)
class MonotonePath:
    """A fine walk whose coarse walk steps straight up, with the coarse step times"""

    walk: EmbeddedWalk
    cut_times: Tuple[int, ...]
    coarse_level: int

    def segments(self) -> List[np.ndarray]:
        return walk_segments(self.walk, self.cut_times)


def monotone_coarse_path(
    n: int, rng: RngStream, fine_offset: int = DEFAULT_FINE_OFFSET
) -> MonotonePath:
    """
    Fine path from 0 to 1 realizing N(n) = 2^n

    Each of the 2^n coarse steps is an independent fine segment conditioned
    to climb 2^fine_offset sites before falling back 2^fine_offset sites.
    """
    if n < 0 or fine_offset < 0:
        raise ValidationError("n and fine_offset must be non-negative")
    unit = 1 << fine_offset
    pieces = []
    cut_times = []
    elapsed = 0
    for k in range(1 << n):
        segment = simulate_conditioned_segment(n + fine_offset, 0, unit, -unit, rng)
        shifted = segment.path + k * unit
        pieces.append(shifted if k == 0 else shifted[1:])
        if k:
            cut_times.append(elapsed)
        elapsed += segment.n_steps
    path = np.concatenate(pieces)
    walk = EmbeddedWalk(
        level=n + fine_offset,
        start_site=0,
        path=path,
        stop_rule=StopRule.BARRIERS,
        exit_side=1,
    )
    return MonotonePath(walk=walk, cut_times=tuple(cut_times), coarse_level=n)


def minimal_crossing_probability(n: int) -> float:
    """P{N(n) = 2^n} = 2 (1/2)^(2^n)"""
    if n < 0:
        raise ValidationError(f"n must be non-negative, got {n}")
    return 2.0 * 0.5 ** (1 << n)


def _minimal_crossing_work(n: int, seed: int, item: WorkItem) -> int:
    rng = RngStream(seed, item.stream_id, (StreamTag.MINIMAL_CROSSING, n))
    bound = 1 << n
    hits = 0
    for _ in range(item.n_samples):
        # no exit is possible before 2^n steps
        path, exited = _run_until_barriers(
            0, -bound, bound, rng, bound, raise_on_limit=False
        )
        hits += int(exited and path.size - 1 == bound)
    return hits


def estimate_minimal_crossing(
    n: int, budget: int, seed: int, queue: WorkQueue = SERIAL
) -> BernoulliEstimate:
    """Monte Carlo estimate of P{N(n) = 2^n} from level-n exit walks"""
    if n < 0:
        raise ValidationError(f"n must be non-negative, got {n}")
    items = split_budget(budget)
    hits = queue.map(partial(_minimal_crossing_work, n, seed), items)
    return pool_counts(hits, [item.n_samples for item in items])


@dataclass(frozen=True)
class SelfIntersectionStrategy:
    """
    Lower-bound strategy for the self-intersection functional

    On {N(n) = 2^n} and the law-of-large-numbers event {2^-n sum Y_j <= 2},
    the functional is at most epsilon.
    """

    q: float
    n: int
    cq: float
    epsilon: float
    log_bound: float
    log_event_probability: float
    lln: BernoulliEstimate

    @property
    def log_probability(self) -> float:
        if self.lln.p_hat <= 0.0:
            return -math.inf
        return self.log_event_probability + math.log(self.lln.p_hat)


def _lln_work(
    q: float, n: int, fine_offset: int, cq: float, seed: int, item: WorkItem
) -> Tuple[int, float]:
    rng = RngStream(seed, item.stream_id, (StreamTag.STRATEGY, n, fine_offset))
    fine_level = n + fine_offset
    scale = cq * 2.0 ** (n * (1.0 + q))
    hits = 0
    total = 0.0
    for _ in range(item.n_samples):
        segments = monotone_coarse_path(n, rng, fine_offset).segments()
        ys = np.array([segment_functional(s, fine_level, q) for s in segments]) * scale
        mean_y = float(ys.mean())
        hits += int(mean_y <= 2.0)
        total += mean_y
    return hits, total


def self_ilt_strategy_bound(
    q: float,
    n: int,
    budget: int,
    seed: int,
    fine_offset: int = DEFAULT_FINE_OFFSET,
    cq: Optional[float] = None,
    cq_budget: Optional[int] = None,
    queue: WorkQueue = SERIAL,
) -> SelfIntersectionStrategy:
    """
    Strategy bound log P{X < eps} >= 2^n log(1/2) + log P{LLN event}

    Args:
        q: Self-intersection exponent, at least 1
        n: Coarse level; the path is forced to cross in 2^n coarse steps
        budget: Monotone paths sampled for the conditional LLN probability
        fine_offset: Extra levels below n used to resolve each coarse step
        cq: Normalizing constant; estimated from unit crossings resolved at
            level fine_offset if omitted

    Returns:
        SelfIntersectionStrategy with eps = 2^(q(2-n)) / C(q), the largest eps
        bracketed by n
    """
    if q < 1.0:
        raise ValidationError(f"q must be at least 1, got {q}")
    if n < 1:
        raise ValidationError(f"n must be at least 1, got {n}")
    if cq is None:
        cq = estimate_cq(q, fine_offset, cq_budget or budget, seed, queue)
    items = split_budget(budget)
    results = queue.map(partial(_lln_work, q, n, fine_offset, cq, seed), items)
    lln = pool_counts([h for h, _ in results], [item.n_samples for item in items])
    mean_y = sum(total for _, total in results) / budget
    logger.info(
        f"Self-intersection strategy q={q} n={n}: "
        f"LLN {lln.p_hat:.4f}, mean Y {mean_y:.4f}"
    )
    log_bound = (1 << n) * math.log(0.5)
    return SelfIntersectionStrategy(
        q=q,
        n=n,
        cq=cq,
        epsilon=2.0 ** (q * (2 - n)) / cq,
        log_bound=log_bound,
        log_event_probability=math.log(2.0) + log_bound,
        lln=lln,
    )


@dataclass(frozen=True)
class SelfIntersectionChebyshev:
    """
    Large-deviation upper bound for the self-intersection functional

    With Y_j the normalized single-step functionals and X_j = 1/2 - Y_j,
    super-additivity gives P{X < eps} <= P{S(2^n) >= 0} <= phi^(2^n), where
    phi = min over lambda of E exp(lambda X) and 2^-(n+1)q <= 2 C eps < 2^-nq.
    """

    q: float
    cq: float
    lam: float
    phi: float
    n_samples: int

    @property
    def rate(self) -> float:
        return -math.log(self.phi)

    @property
    def constant(self) -> float:
        """c with -log P{X < eps} >= c eps^(-1/q)"""
        return self.rate * 2.0 ** (-1.0 - 1.0 / self.q) * self.cq ** (-1.0 / self.q)

    def level_for(self, epsilon: float) -> int:
        """The n bracketing eps, or -1 when 2 C eps >= 1"""
        if epsilon <= 0.0:
            raise ValidationError(f"epsilon must be positive, got {epsilon}")
        scaled = 2.0 * self.cq * epsilon
        if scaled >= 1.0:
            return -1
        return math.ceil(-math.log2(scaled) / self.q) - 1

    def log_upper(self, epsilon: float) -> float:
        """log P{X < eps} <= -rate 2^n; 0 when eps is too large to bracket"""
        n = self.level_for(epsilon)
        if n < 0:
            return 0.0
        return -self.rate * 2.0**n


def self_ilt_chebyshev_upper(
    q: float,
    budget: int,
    seed: int,
    fine_offset: int = DEFAULT_FINE_OFFSET,
    lambda_grid: Optional[Sequence[float]] = None,
    queue: WorkQueue = SERIAL,
) -> SelfIntersectionChebyshev:
    """
    Chebyshev constant phi from unit-crossing draws normalized to mean one

    The draws are the ones estimate_cq averages, so C(q) and phi come from
    one sample.

    Raises:
        NoFeasibleTauError: If phi >= 1 for every lambda on the grid
    """
    values = single_step_functionals(q, fine_offset, budget, seed, queue)
    mean = float(values.mean())
    if mean <= 0.0:
        raise InsufficientDataError("Single-step functional has zero mean")
    ys = values / mean
    lambdas = (
        default_tau_grid()
        if lambda_grid is None
        else np.asarray(lambda_grid, dtype=float)
    )
    if lambdas.size == 0 or np.any(lambdas <= 0.0):
        raise ValidationError("lambda_grid must be nonempty and positive")
    # E exp(lambda (1/2 - Y)) for each lambda
    phis = np.exp(lambdas / 2.0) * np.mean(np.exp(-np.outer(lambdas, ys)), axis=1)
    best = int(np.argmin(phis))
    if phis[best] >= 1.0:
        logger.error(f"min phi = {phis[best]:.6g} >= 1 for q={q}")
        raise NoFeasibleTauError("No lambda on the grid makes phi(lambda) < 1")
    logger.info(
        f"Self-intersection Chebyshev q={q}: lambda {lambdas[best]:.4g}, "
        f"phi {phis[best]:.4f}"
    )
    return SelfIntersectionChebyshev(
        q=q,
        cq=1.0 / mean,
        lam=float(lambdas[best]),
        phi=float(phis[best]),
        n_samples=int(values.size),
    )


def attach_self_ilt_upper_bounds(
    estimate: TailEstimate, upper: SelfIntersectionChebyshev
) -> None:
    """Append the Chebyshev upper bound at every measured eps it brackets"""
    estimate.extra.update({"chebyshev_phi": upper.phi, "chebyshev_c": upper.constant})
    for point in estimate.points:
        if upper.level_for(point.epsilon) < 0:
            continue
        bound = math.exp(upper.log_upper(point.epsilon))
        estimate.bounds.append(
            TailPoint.exact(point.epsilon, bound, TailMethod.BOUND_UPPER)
        )


# Two-phase strategy for mutual intersections


def _phase_one_work(
    functional: IntersectionFunctional,
    configuration: StartConfiguration,
    level: int,
    threshold: float,
    seed: int,
    item: WorkItem,
) -> int:
    rng = RngStream(seed, item.stream_id, (StreamTag.PHASE_ONE, level))
    bound = 1 << level
    hits = 0
    for _ in range(item.n_samples):
        fields = []
        for j in range(1, functional.m + 1):
            sign = configuration.sign(j)
            path, _ = _run_until_barriers(0, -bound // 2, bound, rng)
            if path[-1] != bound:
                break
            walk = EmbeddedWalk(
                level=level,
                start_site=0,
                path=sign * path,
                stop_rule=StopRule.BARRIERS,
                exit_side=sign,
            )
            fields.append(local_time_field(walk))
        else:
            hits += int(mutual_ilt(fields, functional.q_exponents) < threshold)
    return hits


def phase_one_probability(
    functional: IntersectionFunctional,
    configuration: StartConfiguration,
    level: int,
    budget: int,
    seed: int,
    threshold: float = 1.0,
    queue: WorkQueue = SERIAL,
) -> BernoulliEstimate:
    """
    Measured delta for the two-phase strategy, in unit scale

    Each walk in M leaves (-1, 1) at +1 without reaching -1/2, each other
    walk leaves at -1 without reaching +1/2, and X_hat at those exits is
    below `threshold` (eps / r^(1+q) for phase radius r).
    """
    configuration.require_proper()
    if configuration.m != functional.m:
        raise ValidationError("Configuration and functional disagree on m")
    if level < 1:
        raise ValidationError("Phase one needs level >= 1 to resolve the half barrier")
    items = split_budget(budget)
    work = partial(_phase_one_work, functional, configuration, level, threshold, seed)
    hits = queue.map(work, items)
    return pool_counts(hits, [item.n_samples for item in items])


def two_phase_lower_bound(
    functional: IntersectionFunctional,
    epsilon: float,
    delta: float,
    radius_factor: float = 1.0,
    simplified: bool = False,
) -> float:
    """
    P{X < eps} >= delta ((1+r)/2)^(m-2) ((r/2)/(1-r/2))^2
    with r = radius_factor * eps^(1/(1+q))

    delta must be measured with threshold radius_factor^-(1+q). `simplified`
    returns the weaker delta (1/2)^m eps^(2/(1+q)) of the unit radius.
    """
    if functional.m < 2:
        raise ValidationError("Two-phase bound needs at least two walks")
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0.0 <= delta <= 1.0:
        raise ValidationError(f"delta must lie in [0, 1], got {delta}")
    exponent = 1.0 / (1.0 + functional.q_total)
    if simplified:
        return delta * 0.5**functional.m * epsilon ** (2.0 * exponent)
    r = radius_factor * epsilon**exponent
    if not 0.0 < r < 1.0:
        raise ValidationError(f"phase radius must lie in (0, 1), got {r}")
    spread = ((1.0 + r) / 2.0) ** (functional.m - 2)
    return delta * spread * ((r / 2.0) / (1.0 - r / 2.0)) ** 2


def phase_threshold(
    functional: IntersectionFunctional, radius_factor: float = 1.0
) -> float:
    """Unit-scale threshold eps / r^(1+q) for r = radius_factor * eps^(1/(1+q))"""
    if radius_factor <= 0.0:
        raise ValidationError(f"radius_factor must be positive, got {radius_factor}")
    return radius_factor ** -(1.0 + functional.q_total)


def attach_two_phase_bounds(
    estimate: TailEstimate,
    functional: IntersectionFunctional,
    delta: float,
    radius_factor: float = 1.0,
) -> None:
    """Append the two-phase lower bound at every measured eps it covers"""
    estimate.extra["phase_one_delta"] = delta
    exponent = 1.0 / (1.0 + functional.q_total)
    for point in estimate.points:
        eps = point.epsilon
        if not 0.0 < eps < 1.0 or radius_factor * eps**exponent >= 1.0:
            logger.warning(f"No two-phase bound at eps {eps:.4g}: radius not below 1")
            continue
        bound = two_phase_lower_bound(functional, eps, delta, radius_factor)
        estimate.bounds.append(TailPoint.exact(eps, bound, TailMethod.BOUND_LOWER))
