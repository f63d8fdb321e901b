"""
Small-value bounds for the Galton-Watson martingale limit and the end-to-end
exponent experiment
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.parallel import SERIAL, WorkItem, WorkQueue, split_budget
from .constants import (
    BOETTCHER_GRID_POWERS,
    DENSITY_FLOOR,
    DENSITY_ITERATIONS,
    MAX_SIZE_CAP,
    SCHROEDER_GRID_POWERS,
    TAU_MAX,
    TAU_MIN,
    TAU_POINTS,
)
from .exceptions import (
    InsufficientDataError,
    InvalidRegimeError,
    NoFeasibleTauError,
    OutOfRangeError,
    ValidationError,
)
from .galton_watson import (
    DensityGrid,
    GridSpec,
    density_fixed_point,
    sample_W_conditioned_minimal_many,
    sample_W_conditioned_single_many,
    sample_W_many,
    tail_from_density,
)
from .offspring import BranchingParams, OffspringDistribution, Regime, derive_params
from .stats_core import (
    BernoulliEstimate,
    RegressionFit,
    RngStream,
    StreamTag,
    fit_power_law,
    fit_stretched_exponent,
    pool_counts,
    usable_points,
)

logger = logging.getLogger(__name__)

_BRACKET_SLACK = 1e-12


class TailMethod(str, Enum):
    MC = "mc"
    DENSITY = "density"
    CONDITIONED_MC = "conditioned_mc"
    BOUND_LOWER = "bound_lower"
    BOUND_UPPER = "bound_upper"


@dataclass(frozen=True)
class TailPoint:
    epsilon: float
    p_hat: float
    ci_low: float
    ci_high: float
    method: TailMethod
    estimate: Optional[BernoulliEstimate] = None

    @classmethod
    def exact(
        cls, epsilon: float, probability: float, method: TailMethod
    ) -> "TailPoint":
        return cls(epsilon, probability, probability, probability, method)

    @classmethod
    def from_estimate(
        cls, epsilon: float, estimate: BernoulliEstimate, method: TailMethod
    ) -> "TailPoint":
        return cls(
            epsilon,
            estimate.p_hat,
            estimate.ci_low,
            estimate.ci_high,
            method,
            estimate,
        )


@dataclass
class TailEstimate:
    """Measured tail points, bound curves and the fitted exponent"""

    points: List[TailPoint]
    fit: Optional[RegressionFit]
    target_exponent: float
    fit_kind: str
    bounds: List[TailPoint] = field(default_factory=list)
    extra: Dict[str, float] = field(default_factory=dict)
    labels: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        eps = [p.epsilon for p in self.points]
        if any(a <= b for a, b in zip(eps, eps[1:])):
            raise ValidationError("Tail points must have strictly decreasing epsilon")
        if any(not 0.0 <= p.p_hat <= 1.0 for p in self.points + self.bounds):
            raise ValidationError("Tail probabilities must lie in [0, 1]")

    @property
    def slope(self) -> float:
        return self.fit.slope if self.fit else math.nan


# Bracketing helpers


def _bracket_power(epsilon: float, base: float) -> int:
    """Smallest n >= 1 with base^n <= epsilon, for 0 < base < 1"""
    n = math.ceil(math.log(epsilon) / math.log(base) - _BRACKET_SLACK)
    return max(1, n)


def _require(params: BranchingParams, regime: Regime) -> None:
    if params.regime is not regime:
        raise InvalidRegimeError(
            f"Operation needs the {regime.value} regime, got {params.regime.value}"
        )


def _check_unit_epsilon(epsilon: float) -> None:
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")


def schroeder_lower_bound(
    params: BranchingParams, c_w1: float, epsilon: float
) -> float:
    """
    P{W < eps} >= c * p1^n with mu^-n <= eps < mu^-n+1 and c = P{W < 1}

    Raises:
        InvalidRegimeError: Outside the Schroeder regime
    """
    _require(params, Regime.SCHROEDER)
    _check_unit_epsilon(epsilon)
    if not 0.0 < c_w1 < 1.0:
        raise ValidationError(f"c_w1 must lie in (0, 1), got {c_w1}")
    n = _bracket_power(epsilon, 1.0 / params.mu)
    return c_w1 * params.p1**n


def schroeder_upper_bound(
    params: BranchingParams, a_tilde_sup: float, epsilon: float
) -> float:
    """P{W < eps} <= a_tilde * p1^n with mu^-n-1 <= eps < mu^-n"""
    _require(params, Regime.SCHROEDER)
    _check_unit_epsilon(epsilon)
    n = _bracket_power(epsilon, 1.0 / params.mu) - 1
    return min(1.0, a_tilde_sup * params.p1**n)


@dataclass(frozen=True)
class StrategyBound:
    n: int
    log_bound: float
    constant: float
    neg_log_upper: float


def boettcher_strategy_bound(params: BranchingParams, epsilon: float) -> StrategyBound:
    """
    Minimal-tree strategy for the Boettcher regime

    With (nu/mu)^n <= eps < (nu/mu)^(n-1), forcing every individual of the
    first n+1 generations to have nu children has log-probability
    (nu^(n+1) - 1)/(nu - 1) * log p_nu. The constant C = (-log p_nu) nu^2/(nu-1)
    gives -log P{W < eps} <= C eps^(-beta/(1-beta)).
    """
    _require(params, Regime.BOETTCHER)
    _check_unit_epsilon(epsilon)
    nu = params.nu
    n = _bracket_power(epsilon, nu / params.mu)
    individuals = (nu ** (n + 1) - 1) // (nu - 1)
    log_p_nu = math.log(params.p_nu)
    constant = -log_p_nu * nu * nu / (nu - 1)
    beta_ratio = float(params.beta_ratio)  # type: ignore[arg-type]
    return StrategyBound(
        n=n,
        log_bound=individuals * log_p_nu,
        constant=constant,
        neg_log_upper=constant * epsilon ** (-beta_ratio),
    )


def default_tau_grid() -> np.ndarray:
    return np.geomspace(TAU_MIN, TAU_MAX, TAU_POINTS)


def chebyshev_phi(density: DensityGrid, params: BranchingParams, tau: float) -> float:
    """phi(tau) = E exp(tau (nu/mu - W)) on the density grid"""
    shift = params.nu / params.mu
    exponents = tau * (shift - density.nodes)
    return float(np.dot(density.masses, np.exp(exponents)))


def boettcher_chebyshev_upper(
    params: BranchingParams,
    density: DensityGrid,
    tau_grid: Optional[Sequence[float]] = None,
) -> Tuple[float, float]:
    """
    Exponential Chebyshev bound: -log P{W < eps} >= c eps^(-beta/(1-beta))

    Returns:
        (tau_star, c) with c = -nu^-2 log phi(tau_star)

    Raises:
        NoFeasibleTauError: If phi >= 1 on the whole grid
    """
    _require(params, Regime.BOETTCHER)
    taus = default_tau_grid() if tau_grid is None else np.asarray(tau_grid, dtype=float)
    if taus.size == 0:
        raise ValidationError("tau_grid must be nonempty")
    phis = np.array([chebyshev_phi(density, params, t) for t in taus])
    best = int(np.argmin(phis))
    if phis[best] >= 1.0:
        logger.error(f"min phi = {phis[best]:.6g} >= 1; density likely unconverged")
        raise NoFeasibleTauError("No tau on the grid makes phi(tau) < 1")
    c = -math.log(phis[best]) / params.nu**2
    return float(taus[best]), c


def chebyshev_log_upper(c: float, params: BranchingParams, epsilon: float) -> float:
    """log P{W < eps} <= -c eps^(-beta/(1-beta))"""
    return -c * epsilon ** (-params.beta_ratio)  # type: ignore[operator]


def beta_sequence(
    density: DensityGrid,
    params: BranchingParams,
    n_max: int,
    below_coverage: str = "raise",
) -> List[float]:
    """
    beta(i) = P{W < mu^-i} / p1 for i = 0..n_max

    Args:
        below_coverage: "raise" rejects levels under the grid's resolved
            range; "floor" replaces them by the mass below the first node,
            an upper bound for the true value

    Raises:
        OutOfRangeError: If mu^-n_max is below coverage and below_coverage is "raise"
    """
    _require(params, Regime.SCHROEDER)
    if below_coverage not in ("raise", "floor"):
        raise ValidationError(
            f"below_coverage must be 'raise' or 'floor', got {below_coverage!r}"
        )
    x_min = density.spec.x_min
    if params.mu ** (-n_max) < x_min and below_coverage == "raise":
        raise OutOfRangeError(
            f"mu^-{n_max} = {params.mu ** (-n_max):.3g} "
            f"is below grid coverage {x_min:g}"
        )
    floor = tail_from_density(density, x_min)
    betas = []
    for i in range(n_max + 1):
        level = params.mu ** (-i)
        probability = tail_from_density(density, level) if level >= x_min else floor
        betas.append(probability / params.p1)
    return betas


@dataclass(frozen=True)
class RecursionCertificate:
    values: List[float]
    sup: float


def a_tilde_recursion(betas: Sequence[float]) -> RecursionCertificate:
    """Running products a~(n) = prod_{i<n} (1 + beta(i)), with a~(0) = 1"""
    if any(b < 0.0 for b in betas):
        raise ValidationError("betas must be non-negative")
    values = [1.0]
    for b in betas:
        values.append(values[-1] * (1.0 + b))
    return RecursionCertificate(values=values, sup=max(values))


# Experiment


def default_epsilon_grid(params: BranchingParams) -> List[float]:
    if params.regime is Regime.SCHROEDER:
        return [params.mu ** (-n) for n in SCHROEDER_GRID_POWERS]
    ratio = params.nu / params.mu
    return [ratio**n for n in BOETTCHER_GRID_POWERS]


def _mc_tail_work(
    dist: OffspringDistribution,
    depth: int,
    eps_grid: Tuple[float, ...],
    seed: int,
    item: WorkItem,
) -> List[int]:
    rng = RngStream(seed, item.stream_id, (StreamTag.GW_MC,))
    draws = sample_W_many(dist, depth, item.n_samples, rng, size_cap=MAX_SIZE_CAP)
    return [int(np.count_nonzero(draws < eps)) for eps in eps_grid]


def _conditioned_tail_work(
    dist: OffspringDistribution,
    point_index: int,
    condition_depth: int,
    total_depth: int,
    threshold: float,
    seed: int,
    item: WorkItem,
) -> int:
    sub_key = (StreamTag.GW_CONDITIONED, point_index, condition_depth)
    rng = RngStream(seed, item.stream_id, sub_key)
    params = derive_params(dist)
    sampler = (
        sample_W_conditioned_minimal_many
        if params.regime is Regime.BOETTCHER
        else sample_W_conditioned_single_many
    )
    draws = sampler(
        dist, condition_depth, total_depth, item.n_samples, rng, size_cap=MAX_SIZE_CAP
    )
    return int(np.count_nonzero(draws < threshold))


def _counts_to_estimates(
    counts: List[List[int]], items: List[WorkItem]
) -> List[BernoulliEstimate]:
    trials = [item.n_samples for item in items]
    return [pool_counts(column, trials) for column in zip(*counts)]


def _fit(params: BranchingParams, points: List[TailPoint]) -> Tuple[RegressionFit, str]:
    pairs = [(p.epsilon, p.p_hat) for p in points]
    if params.regime is Regime.SCHROEDER:
        usable = usable_points(pairs)
        if len(usable) < 3:
            raise InsufficientDataError(f"Only {len(usable)} usable tail points")
        return fit_power_law(usable), "power"
    usable = usable_points(pairs, upper=math.exp(-1.0))
    if len(usable) < 3:
        raise InsufficientDataError(f"Only {len(usable)} usable tail points")
    return fit_stretched_exponent(usable), "stretched"


def gw_tail_experiment(
    dist: OffspringDistribution,
    eps_grid: Optional[Sequence[float]] = None,
    method: TailMethod = TailMethod.DENSITY,
    budget: int = 10_000,
    seed: int = 0,
    depth: int = 30,
    iterations: int = DENSITY_ITERATIONS,
    grid_spec: Optional[GridSpec] = None,
    queue: WorkQueue = SERIAL,
) -> TailEstimate:
    """
    Measure P{W < eps} over an epsilon grid and fit the regime's exponent

    Schroeder laws get a power-law fit targeting tau; Boettcher laws get a
    stretched-exponential fit targeting -beta/(1-beta). Analytic bound
    curves are attached for bracketing.

    Args:
        dist: Offspring law with p_0 = 0
        eps_grid: Epsilon values; defaults to the regime-aligned powers
        method: density, mc or conditioned_mc
        budget: Monte Carlo draws per grid (mc) or per point (conditioned_mc)
        seed: Seed for all random streams
        depth: Truncation depth of W_n for Monte Carlo
        iterations: Smoothing steps for the density method
        grid_spec: Density grid layout
        queue: Work queue for Monte Carlo batches

    Raises:
        InsufficientDataError: If fewer than three usable points remain
    """
    params = derive_params(dist)
    if eps_grid is None:
        base = default_epsilon_grid(params)
    else:
        base = [float(e) for e in eps_grid]
    grid = sorted(set(base), reverse=True)
    if any(not 0.0 < e < 1.0 for e in grid):
        raise ValidationError("epsilon values must lie in (0, 1)")
    method = TailMethod(method)
    logger.info(
        f"Tail experiment for {dist.describe()} with method {method.value} "
        f"on {len(grid)} points"
    )

    density: Optional[DensityGrid] = None
    if method is not TailMethod.MC or params.regime is Regime.BOETTCHER:
        density = density_fixed_point(dist, grid_spec, iterations)

    points: List[TailPoint] = []
    if method is TailMethod.DENSITY:
        assert density is not None
        for eps in grid:
            probability = tail_from_density(density, eps)
            if params.regime is Regime.BOETTCHER and probability < DENSITY_FLOOR:
                logger.warning(
                    f"Dropping eps {eps:.4g}: "
                    f"density tail {probability:.3g} below floor"
                )
                continue
            points.append(TailPoint.exact(eps, probability, TailMethod.DENSITY))
    elif method is TailMethod.MC:
        items = split_budget(budget)
        work = partial(_mc_tail_work, dist, depth, tuple(grid), seed)
        counts = queue.map(work, items)
        for eps, estimate in zip(grid, _counts_to_estimates(counts, items)):
            points.append(TailPoint.from_estimate(eps, estimate, TailMethod.MC))
    else:
        points = _conditioned_points(dist, params, grid, budget, seed, depth, queue)

    fit: Optional[RegressionFit]
    fit_kind = "power" if params.regime is Regime.SCHROEDER else "stretched"
    try:
        fit, fit_kind = _fit(params, points)
    except InsufficientDataError:
        logger.error(
            f"Too few usable points for {dist.describe()} with method {method.value}"
        )
        raise

    if params.regime is Regime.SCHROEDER:
        target = float(params.tau)  # type: ignore[arg-type]
    else:
        target = -float(params.beta_ratio)  # type: ignore[arg-type]
    estimate = TailEstimate(
        points=points, fit=fit, target_exponent=target, fit_kind=fit_kind
    )
    if density is not None:
        _attach_bounds(estimate, params, density, grid)
    return estimate


def _conditioned_points(
    dist: OffspringDistribution,
    params: BranchingParams,
    grid: List[float],
    budget: int,
    seed: int,
    depth: int,
    queue: WorkQueue,
) -> List[TailPoint]:
    """Lower-bound cross-check: P{W < eps} >= P(event) * P{W < eps | event}"""
    points = []
    items = split_budget(budget)
    for index, eps in enumerate(grid):
        if params.regime is Regime.BOETTCHER:
            ratio = params.nu / params.mu
            k = _bracket_power(eps, ratio) + 1
            individuals = (params.nu**k - 1) // (params.nu - 1)
            log_event = individuals * math.log(params.p_nu)
        else:
            k = _bracket_power(eps, 1.0 / params.mu)
            log_event = k * math.log(params.p1)
        total_depth = max(depth, k)
        work = partial(
            _conditioned_tail_work, dist, index, k, total_depth, eps, seed
        )
        hits = queue.map(work, items)
        conditional = pool_counts(hits, [item.n_samples for item in items])
        scale = math.exp(log_event)
        points.append(
            TailPoint(
                epsilon=eps,
                p_hat=scale * conditional.p_hat,
                ci_low=scale * conditional.ci_low,
                ci_high=scale * conditional.ci_high,
                method=TailMethod.CONDITIONED_MC,
                estimate=conditional,
            )
        )
    return points


def _attach_bounds(
    estimate: TailEstimate,
    params: BranchingParams,
    density: DensityGrid,
    grid: List[float],
) -> None:
    if params.regime is Regime.SCHROEDER:
        c_w1 = tail_from_density(density, 1.0)
        n_max = max(_bracket_power(min(grid), 1.0 / params.mu) + 1, 1)
        betas = beta_sequence(density, params, n_max, below_coverage="floor")
        certificate = a_tilde_recursion(betas)
        estimate.extra.update({"c_w1": c_w1, "a_tilde_sup": certificate.sup})
        for eps in grid:
            lower = schroeder_lower_bound(params, c_w1, eps)
            upper = schroeder_upper_bound(params, certificate.sup, eps)
            estimate.bounds.append(TailPoint.exact(eps, lower, TailMethod.BOUND_LOWER))
            estimate.bounds.append(TailPoint.exact(eps, upper, TailMethod.BOUND_UPPER))
        return

    try:
        tau_star, c = boettcher_chebyshev_upper(params, density)
    except NoFeasibleTauError:
        logger.warning("No Chebyshev bound available; skipping upper bound curve")
        c, tau_star = 0.0, math.nan
    estimate.extra.update({"tau_star": tau_star, "chebyshev_c": c})
    for eps in grid:
        strategy = boettcher_strategy_bound(params, eps)
        estimate.extra.setdefault("strategy_C", strategy.constant)
        lower = math.exp(strategy.log_bound)
        estimate.bounds.append(TailPoint.exact(eps, lower, TailMethod.BOUND_LOWER))
        if c > 0.0:
            upper = math.exp(chebyshev_log_upper(c, params, eps))
            estimate.bounds.append(TailPoint.exact(eps, upper, TailMethod.BOUND_UPPER))


def tail_rows(estimate: TailEstimate) -> List[Tuple[float, float, float, float, str]]:
    """(epsilon, p_hat, ci_low, ci_high, method) rows, measured points first"""
    return [
        (p.epsilon, p.p_hat, p.ci_low, p.ci_high, p.method.value)
        for p in estimate.points + estimate.bounds
    ]
