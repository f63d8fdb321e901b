"""
Galton-Watson simulation, Monte Carlo draws of the martingale limit W,
conditioned samplers for the small-value strategies, and a grid solver for
the law of W as the fixed point of W = mu^-1 (W_1 + ... + W_N)
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from .constants import (
    DENSITY_COST_BUDGET,
    DENSITY_ITERATIONS,
    DENSITY_TV_TOLERANCE,
    DEFAULT_SIZE_CAP,
    GRID_N_GEOMETRIC,
    GRID_N_LINEAR,
    GRID_TAIL_MASS_LIMIT,
    GRID_X_MAX,
    GRID_X_MIN,
    GRID_X_SWITCH,
)
from .exceptions import (
    InvalidRegimeError,
    OutOfRangeError,
    ResourceLimitError,
    ValidationError,
)
from .offspring import OffspringDistribution, Regime, derive_params
from .stats_core import RngStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationTrace:
    sizes: Tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1


def _require_no_extinction(dist: OffspringDistribution) -> None:
    if dist.prob(0) > 0.0:
        raise ValidationError("Simulation needs p_0 = 0; prune the distribution first")


def _check_cap(sizes: np.ndarray, size_cap: int, generation: int) -> None:
    if sizes.size and int(sizes.max()) > size_cap:
        logger.error(f"Generation {generation} exceeded size cap {size_cap}")
        raise ResourceLimitError(
            f"Generation size exceeded {size_cap} at generation {generation}; "
            "reduce the depth",
            limit=size_cap,
        )


def simulate_generations(
    dist: OffspringDistribution,
    n: int,
    rng: RngStream,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> GenerationTrace:
    """
    Exact simulation of Z_0 = 1, Z_1, ..., Z_n

    Raises:
        ValidationError: If p_0 > 0 or n < 0
        ResourceLimitError: If any generation exceeds size_cap
    """
    _require_no_extinction(dist)
    if n < 0:
        raise ValidationError(f"Generation count must be non-negative, got {n}")
    sizes = [1]
    current = np.array([1], dtype=np.int64)
    for generation in range(1, n + 1):
        current = dist.sample_sums(current, rng.generator)
        _check_cap(current, size_cap, generation)
        sizes.append(int(current[0]))
    return GenerationTrace(tuple(sizes))


def _evolve(
    dist: OffspringDistribution,
    start: np.ndarray,
    generations: int,
    rng: RngStream,
    size_cap: int,
) -> np.ndarray:
    current = start.astype(np.int64)
    for generation in range(1, generations + 1):
        current = dist.sample_sums(current, rng.generator)
        _check_cap(current, size_cap, generation)
    return current


def sample_W_many(
    dist: OffspringDistribution,
    depth: int,
    n_samples: int,
    rng: RngStream,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> np.ndarray:
    """Vectorized draws of W_depth = Z_depth / mu^depth"""
    _require_no_extinction(dist)
    if depth < 0 or n_samples < 0:
        raise ValidationError("depth and n_samples must be non-negative")
    sizes = _evolve(dist, np.ones(n_samples, dtype=np.int64), depth, rng, size_cap)
    return sizes / dist.mean**depth


def sample_W(
    dist: OffspringDistribution,
    depth: int,
    rng: RngStream,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> float:
    """One draw of the truncated martingale W_depth"""
    return float(sample_W_many(dist, depth, 1, rng, size_cap)[0])


def minimal_growth_log_probability(
    dist: OffspringDistribution, condition_depth: int
) -> float:
    """log P{Z_j = nu^j for all j <= k} = (nu^k - 1)/(nu - 1) * log p_nu"""
    params = derive_params(dist)
    if params.regime is not Regime.BOETTCHER:
        raise InvalidRegimeError(
            "Minimal growth conditioning needs the Boettcher regime"
        )
    nu = params.nu
    individuals = (nu**condition_depth - 1) // (nu - 1)
    return individuals * math.log(params.p_nu)


def single_line_log_probability(
    dist: OffspringDistribution, condition_depth: int
) -> float:
    """log P{Z_k = 1} = k log p_1"""
    params = derive_params(dist)
    if params.regime is not Regime.SCHROEDER:
        raise InvalidRegimeError("Single-line conditioning needs the Schroeder regime")
    return condition_depth * math.log(params.p1)


def _check_depths(condition_depth: int, total_depth: int) -> None:
    if not 0 <= condition_depth <= total_depth:
        raise ValidationError(
            "Need 0 <= condition_depth <= total_depth, "
            f"got {condition_depth}, {total_depth}"
        )


def sample_W_conditioned_minimal_many(
    dist: OffspringDistribution,
    condition_depth: int,
    total_depth: int,
    n_samples: int,
    rng: RngStream,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> np.ndarray:
    """Draws of W_n given every individual up to generation k had exactly nu children"""
    params = derive_params(dist)
    if params.regime is not Regime.BOETTCHER:
        raise InvalidRegimeError(
            "Minimal growth conditioning needs the Boettcher regime; "
            "condition on Z_k = 1 in the Schroeder regime"
        )
    _check_depths(condition_depth, total_depth)
    start = np.full(n_samples, params.nu**condition_depth, dtype=np.int64)
    sizes = _evolve(dist, start, total_depth - condition_depth, rng, size_cap)
    return sizes / params.mu**total_depth


def sample_W_conditioned_minimal(
    dist: OffspringDistribution,
    condition_depth: int,
    total_depth: int,
    rng: RngStream,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> float:
    draws = sample_W_conditioned_minimal_many(
        dist, condition_depth, total_depth, 1, rng, size_cap
    )
    return float(draws[0])


def sample_W_conditioned_single_many(
    dist: OffspringDistribution,
    condition_depth: int,
    total_depth: int,
    n_samples: int,
    rng: RngStream,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> np.ndarray:
    """Draws of W_n given Z_k = 1"""
    params = derive_params(dist)
    if params.regime is not Regime.SCHROEDER:
        raise InvalidRegimeError("Single-line conditioning needs the Schroeder regime")
    _check_depths(condition_depth, total_depth)
    start = np.ones(n_samples, dtype=np.int64)
    sizes = _evolve(dist, start, total_depth - condition_depth, rng, size_cap)
    return sizes / params.mu**total_depth


def sample_W_conditioned_single(
    dist: OffspringDistribution,
    condition_depth: int,
    total_depth: int,
    rng: RngStream,
    size_cap: int = DEFAULT_SIZE_CAP,
) -> float:
    draws = sample_W_conditioned_single_many(
        dist, condition_depth, total_depth, 1, rng, size_cap
    )
    return float(draws[0])


# Density grid


@dataclass(frozen=True)
class GridSpec:
    """
    Node layout: 0, geometric nodes on [x_min, x_switch), then linear nodes on
    [x_switch, x_max]
    """

    x_min: float = GRID_X_MIN
    x_switch: float = GRID_X_SWITCH
    x_max: float = GRID_X_MAX
    n_geometric: int = GRID_N_GEOMETRIC
    n_linear: int = GRID_N_LINEAR

    def __post_init__(self) -> None:
        if not 0.0 < self.x_min < self.x_switch < self.x_max:
            raise ValidationError("Grid needs 0 < x_min < x_switch < x_max")
        if self.n_geometric < 1 or self.n_linear < 1:
            raise ValidationError("Grid needs at least one bin in each zone")

    def nodes(self) -> np.ndarray:
        geometric = np.geomspace(self.x_min, self.x_switch, self.n_geometric + 1)[:-1]
        linear = np.linspace(self.x_switch, self.x_max, self.n_linear + 1)
        return np.concatenate(([0.0], geometric, linear))

    def edges(self) -> np.ndarray:
        nodes = self.nodes()
        midpoints = 0.5 * (nodes[:-1] + nodes[1:])
        return np.concatenate(([0.0], midpoints, [self.x_max]))


@dataclass(frozen=True)
class DensityGrid:
    """Discretized law of W

    Mass sits on representative nodes; bin i is [edges[i], edges[i+1]) around
    nodes[i] and is read as uniform when interpolating the CDF.
    """

    spec: GridSpec
    nodes: np.ndarray
    edges: np.ndarray
    masses: np.ndarray
    mean: float
    iterations: int = 0
    converged: bool = True
    last_tv: float = 0.0
    overflow_mass: float = 0.0
    notes: List[str] = field(default_factory=list)

    @property
    def x_max(self) -> float:
        return float(self.edges[-1])


@dataclass(frozen=True)
class _PairMap:
    """Precomputed re-binning of every node-pair sum"""

    low: np.ndarray
    low_weight: np.ndarray
    high_weight: np.ndarray
    overflow: np.ndarray


def _split(
    values: np.ndarray, nodes: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Neighbour index, upper fraction and overflow mask for splitting onto nodes"""
    n = nodes.size
    low = np.searchsorted(nodes, values, side="right") - 1
    low = np.clip(low, 0, n - 2)
    frac = (values - nodes[low]) / (nodes[low + 1] - nodes[low])
    overflow = values > nodes[-1]
    frac = np.clip(frac, 0.0, 1.0)
    return low, frac, overflow


@lru_cache(maxsize=2)
def _pair_map(spec: GridSpec) -> _PairMap:
    nodes = spec.nodes()
    sums = (nodes[:, None] + nodes[None, :]).ravel()
    low, frac, overflow = _split(sums, nodes)
    keep = (~overflow).astype(float)
    return _PairMap(
        low=low.astype(np.int32),
        low_weight=(1.0 - frac) * keep,
        high_weight=frac * keep,
        overflow=overflow,
    )


def _rebin(
    values: np.ndarray, weights: np.ndarray, nodes: np.ndarray
) -> Tuple[np.ndarray, float]:
    low, frac, overflow = _split(values, nodes)
    kept = np.where(overflow, 0.0, weights)
    n = nodes.size
    out = np.bincount(low, kept * (1.0 - frac), minlength=n)
    out += np.bincount(low + 1, kept * frac, minlength=n)
    return out, float(weights[overflow].sum())


def _convolve(
    a: np.ndarray, b: np.ndarray, pairs: _PairMap
) -> Tuple[np.ndarray, float]:
    """Law of X + Y on the nodes, splitting each pair sum between its neighbours"""
    n = a.size
    w = np.outer(a, b).ravel()
    out = np.bincount(pairs.low, w * pairs.low_weight, minlength=n)
    out += np.bincount(pairs.low + 1, w * pairs.high_weight, minlength=n)
    return out, float(w[pairs.overflow].sum())


def _smoothing_iteration(
    masses: np.ndarray,
    nodes: np.ndarray,
    offspring_probs: np.ndarray,
    pairs: _PairMap,
) -> Tuple[np.ndarray, float]:
    mixture = np.zeros_like(masses)
    overflow = 0.0
    power = masses
    for k in range(1, offspring_probs.size):
        if k > 1:
            power, lost = _convolve(power, masses, pairs)
            overflow += offspring_probs[k] * lost
        if offspring_probs[k] > 0.0:
            mixture += offspring_probs[k] * power

    total = mixture.sum()
    mixture /= total
    # dividing by the mean of the sum is the 1/mu rescale plus mean renormalization
    sum_mean = float(np.dot(mixture, nodes))
    rescaled, lost = _rebin(nodes / sum_mean, mixture, nodes)
    rescaled /= rescaled.sum()
    return rescaled, overflow + lost


def _point_mass(nodes: np.ndarray, at: float) -> np.ndarray:
    masses, _ = _rebin(np.array([at]), np.array([1.0]), nodes)
    out = np.zeros(nodes.size)
    out[: masses.size] = masses
    return out


def _estimate_cost(
    spec: GridSpec, offspring_probs: np.ndarray, iterations: int
) -> float:
    n = 3 + spec.n_geometric + spec.n_linear
    convolutions = max(offspring_probs.size - 2, 0)
    return float(n) ** 2 * convolutions * iterations


def _make_grid(
    spec: GridSpec,
    nodes: np.ndarray,
    masses: np.ndarray,
    iterations: int,
    last_tv: float,
    overflow: float,
) -> DensityGrid:
    converged = last_tv <= DENSITY_TV_TOLERANCE
    notes = []
    if not converged:
        notes.append(f"total variation {last_tv:.3g} above {DENSITY_TV_TOLERANCE:g}")
        logger.warning(
            f"Density iteration not converged after {iterations} steps "
            f"(TV {last_tv:.3g})"
        )
    if overflow > GRID_TAIL_MASS_LIMIT:
        notes.append(f"mass {overflow:.3g} beyond x_max dropped")
        logger.warning(
            f"Mass {overflow:.3g} fell beyond x_max = {spec.x_max}; "
            "consider a larger x_max"
        )
    return DensityGrid(
        spec=spec,
        nodes=nodes,
        edges=spec.edges(),
        masses=masses,
        mean=float(np.dot(masses, nodes)),
        iterations=iterations,
        converged=converged,
        last_tv=last_tv,
        overflow_mass=overflow,
        notes=notes,
    )


def density_fixed_point(
    dist: OffspringDistribution,
    grid_spec: Optional[GridSpec] = None,
    iterations: int = DENSITY_ITERATIONS,
    cost_budget: float = DENSITY_COST_BUDGET,
) -> DensityGrid:
    """
    Iterate the smoothing transform on a discretized law, from a point mass at 1

    Each step mixes the k-fold convolutions with weights p_k, rescales the axis
    so the mean is 1, and re-bins by splitting mass between neighbouring nodes
    (mass and mean are preserved exactly). Iteration k is the law of W_k.

    Args:
        dist: Offspring law with p_0 = 0
        grid_spec: Node layout, defaults to GridSpec()
        iterations: Number of smoothing steps
        cost_budget: Cap on pair evaluations

    Returns:
        DensityGrid with a convergence flag and last total-variation change

    Raises:
        ResourceLimitError: If the convolution cost exceeds cost_budget
    """
    _require_no_extinction(dist)
    if iterations < 0:
        raise ValidationError(f"iterations must be non-negative, got {iterations}")
    spec = grid_spec or GridSpec()
    offspring_probs = dist.truncated_probs()
    cost = _estimate_cost(spec, offspring_probs, iterations)
    if cost > cost_budget:
        raise ResourceLimitError(
            f"Density solver needs {cost:.3g} pair evaluations, "
            f"budget is {cost_budget:.3g}",
            limit=cost_budget,
        )

    nodes = spec.nodes()
    pairs = _pair_map(spec)
    masses = _point_mass(nodes, 1.0)
    last_tv = math.inf if iterations else 0.0
    overflow = 0.0
    for step in range(1, iterations + 1):
        updated, overflow = _smoothing_iteration(masses, nodes, offspring_probs, pairs)
        last_tv = 0.5 * float(np.abs(updated - masses).sum())
        masses = updated
        logger.debug(f"Smoothing step {step}: TV change {last_tv:.3e}")

    logger.info(f"Density fixed point for {dist.describe()} after {iterations} steps")
    return _make_grid(spec, nodes, masses, iterations, last_tv, overflow)


def smoothing_step(grid: DensityGrid, dist: OffspringDistribution) -> DensityGrid:
    """Apply one more smoothing step to an existing grid"""
    _require_no_extinction(dist)
    pairs = _pair_map(grid.spec)
    updated, overflow = _smoothing_iteration(
        grid.masses, grid.nodes, dist.truncated_probs(), pairs
    )
    last_tv = 0.5 * float(np.abs(updated - grid.masses).sum())
    return _make_grid(
        grid.spec, grid.nodes, updated, grid.iterations + 1, last_tv, overflow
    )


def tail_from_density(grid: DensityGrid, epsilon: float) -> float:
    """
    P{W < epsilon} read off the grid

    Bins entirely below epsilon count fully; the straddling bin contributes
    the fraction of its width below epsilon.

    Raises:
        OutOfRangeError: If epsilon is not in (0, x_max]
    """
    if epsilon <= 0.0 or epsilon > grid.x_max:
        raise OutOfRangeError(
            f"epsilon {epsilon!r} outside grid coverage (0, {grid.x_max}]"
        )
    if epsilon < grid.spec.x_min:
        logger.warning(
            f"epsilon {epsilon:.3g} below resolved grid coverage {grid.spec.x_min:g}"
        )
    edges = grid.edges
    index = int(np.searchsorted(edges, epsilon, side="right")) - 1
    index = min(index, grid.masses.size - 1)
    below = float(grid.masses[:index].sum())
    width = edges[index + 1] - edges[index]
    fraction = min(1.0, (epsilon - edges[index]) / width) if width > 0.0 else 1.0
    return min(1.0, below + fraction * float(grid.masses[index]))


def density_rows(grid: DensityGrid) -> List[Tuple[float, float, float]]:
    """(bin_low, bin_high, mass) rows"""
    return [
        (float(lo), float(hi), float(m))
        for lo, hi, m in zip(grid.edges[:-1], grid.edges[1:], grid.masses)
    ]
