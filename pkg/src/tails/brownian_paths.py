"""
Dyadic embedded random walks and their discrete local-time fields

A Brownian path observed at successive crossings of the grid 2^-n Z is a
simple random walk, so walks are simulated directly on integer sites k that
stand for positions k * 2^-n.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from ..utils.parallel import SERIAL, WorkItem, WorkQueue, split_budget
from .constants import MAX_WALK_STEPS, REJECTION_MIN_ACCEPTANCE, WALK_CHUNK_STEPS
from .exceptions import ResourceLimitError, ValidationError
from .stats_core import (
    BernoulliEstimate,
    RegressionFit,
    RngStream,
    StreamTag,
    fit_log_linear,
    pool_counts,
    usable_points,
)

logger = logging.getLogger(__name__)


class StopRule(str, Enum):
    EXIT_UNIT_INTERVAL = "exit_unit_interval"
    FIXED_STEPS = "fixed_steps"
    BARRIERS = "barriers"


@dataclass(frozen=True)
class EmbeddedWalk:
    """A lattice path on the 2^-level grid with its visit counts

    visits[i] counts visits to site min_site + i, the initial site included.
    """

    level: int
    start_site: int
    path: np.ndarray = field(repr=False)
    stop_rule: StopRule
    exit_side: Optional[int] = None
    visits: np.ndarray = field(init=False, repr=False)
    min_site: int = field(init=False)

    def __post_init__(self) -> None:
        min_site = int(self.path.min())
        object.__setattr__(self, "min_site", min_site)
        object.__setattr__(self, "visits", np.bincount(self.path - min_site))

    @property
    def n_steps(self) -> int:
        return int(self.path.size) - 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.min_site, self.min_site + self.visits.size)

    @property
    def final_site(self) -> int:
        return int(self.path[-1])


@dataclass(frozen=True)
class LocalTimeField:
    level: int
    sites: np.ndarray
    values: np.ndarray

    @property
    def spacing(self) -> float:
        return 2.0**-self.level

    @property
    def x(self) -> np.ndarray:
        return self.sites * self.spacing

    def occupation(self) -> float:
        """Riemann sum of L over space, the discrete exit or horizon time"""
        return float(self.values.sum()) * self.spacing


def _initial_chunk(start: int, down: int, up: int) -> int:
    # (start - down)(up - start) is the mean exit time of the unconditioned walk
    return int(min(WALK_CHUNK_STEPS, max(64, (start - down) * (up - start))))


def _steps(rng: RngStream, size: int) -> np.ndarray:
    coins = rng.generator.integers(0, 2, size=size, dtype=np.int8)
    return coins * np.int8(2) - np.int8(1)


def _run_until_barriers(
    start: int,
    down: int,
    up: int,
    rng: RngStream,
    max_steps: int = MAX_WALK_STEPS,
    raise_on_limit: bool = True,
) -> Tuple[np.ndarray, bool]:
    """
    Walk from `start` until it hits `down` or `up`

    Returns:
        (path including both endpoints, whether a barrier was hit); when the
        step limit is reached without a hit and raise_on_limit is False, the
        truncated path is returned
    """
    pieces = [np.array([start], dtype=np.int64)]
    position = start
    taken = 0
    chunk = _initial_chunk(start, down, up)
    while taken < max_steps:
        size = min(chunk, max_steps - taken)
        walk = position + np.cumsum(_steps(rng, size), dtype=np.int64)
        hits = np.flatnonzero((walk >= up) | (walk <= down))
        if hits.size:
            pieces.append(walk[: hits[0] + 1])
            return np.concatenate(pieces), True
        pieces.append(walk)
        position = int(walk[-1])
        taken += size
        chunk = min(chunk * 2, 64 * WALK_CHUNK_STEPS)
    if raise_on_limit:
        logger.error(f"Walk from site {start} did not stop within {max_steps} steps")
        raise ResourceLimitError(f"Walk exceeded {max_steps} steps", limit=max_steps)
    return np.concatenate(pieces), False


def simulate_exit_walk(
    level: int, start_site: int, rng: RngStream, max_steps: int = MAX_WALK_STEPS
) -> EmbeddedWalk:
    """
    Simple random walk on the 2^-level grid until it hits -1 or +1

    Raises:
        ValidationError: If |start_site| >= 2^level
        ResourceLimitError: If the walk exceeds max_steps
    """
    if level < 0:
        raise ValidationError(f"level must be non-negative, got {level}")
    bound = 1 << level
    if abs(start_site) >= bound:
        raise ValidationError(
            f"start site {start_site} must lie strictly inside (-{bound}, {bound})"
        )
    path, _ = _run_until_barriers(start_site, -bound, bound, rng, max_steps)
    return EmbeddedWalk(
        level=level,
        start_site=start_site,
        path=path,
        stop_rule=StopRule.EXIT_UNIT_INTERVAL,
        exit_side=1 if path[-1] > 0 else -1,
    )


def simulate_barrier_walk(
    level: int,
    start_site: int,
    up_target: int,
    down_barrier: int,
    rng: RngStream,
    max_steps: int = MAX_WALK_STEPS,
) -> EmbeddedWalk:
    """Walk until it hits up_target (exit_side +1) or down_barrier (exit_side -1)"""
    _check_ordering(start_site, up_target, down_barrier)
    path, _ = _run_until_barriers(start_site, down_barrier, up_target, rng, max_steps)
    return EmbeddedWalk(
        level=level,
        start_site=start_site,
        path=path,
        stop_rule=StopRule.BARRIERS,
        exit_side=1 if path[-1] >= up_target else -1,
    )


def simulate_fixed_time_walk(
    level: int,
    start_site: int,
    horizon: float,
    rng: RngStream,
    max_steps: int = MAX_WALK_STEPS,
) -> EmbeddedWalk:
    """Walk of exactly floor(horizon * 4^level) steps with no spatial stopping"""
    if horizon < 0.0:
        raise ValidationError(f"horizon must be non-negative, got {horizon}")
    n_steps = math.floor(horizon * 4.0**level)
    if n_steps > max_steps:
        raise ResourceLimitError(
            f"Horizon needs {n_steps} steps, limit is {max_steps}", limit=max_steps
        )
    walk = start_site + np.cumsum(_steps(rng, n_steps), dtype=np.int64)
    path = np.concatenate(([start_site], walk)).astype(np.int64)
    return EmbeddedWalk(
        level=level,
        start_site=start_site,
        path=path,
        stop_rule=StopRule.FIXED_STEPS,
    )


def local_time_field(walk: EmbeddedWalk) -> LocalTimeField:
    """L(x) = 2^-level * visits(x)"""
    return LocalTimeField(
        level=walk.level,
        sites=walk.sites,
        values=walk.visits * 2.0**-walk.level,
    )


def gamblers_ruin(start: float, up: float, down: float) -> float:
    """Probability (start - down)/(up - down) of reaching up before down"""
    if not down < start < up:
        raise ValidationError(f"Need down < start < up, got {down}, {start}, {up}")
    return (start - down) / (up - down)


def _check_ordering(start: int, up: int, down: int) -> None:
    if not down < start < up:
        raise ValidationError(
            f"Need down_barrier < from_site < up_target, got {down}, {start}, {up}"
        )


def h_transform_step_up(site: int, down_barrier: int) -> float:
    """Step-up probability h(x+1)/(2h(x)) with h(x) = x - down_barrier"""
    return (site + 1 - down_barrier) / (2.0 * (site - down_barrier))


def _h_transform_path(start: int, up: int, down: int, rng: RngStream) -> np.ndarray:
    path = [start]
    position = start
    chunk = _initial_chunk(start, down, up)
    while position != up:
        uniforms = rng.generator.random(chunk)
        for u in uniforms:
            position += 1 if u < h_transform_step_up(position, down) else -1
            path.append(position)
            if position == up:
                break
        if len(path) > MAX_WALK_STEPS:
            raise ResourceLimitError(
                "Conditioned segment exceeded the step limit", limit=MAX_WALK_STEPS
            )
    return np.array(path, dtype=np.int64)


def simulate_conditioned_segment(
    level_fine: int,
    from_site: int,
    up_target: int,
    down_barrier: int,
    rng: RngStream,
) -> EmbeddedWalk:
    """
    Fine-level walk conditioned to hit up_target before down_barrier

    When the unconditioned success probability is not small the segment is
    drawn by rejection, which has the same law as the h-transform walk;
    otherwise the h-transform chain is stepped directly.

    Raises:
        ValidationError: Unless down_barrier < from_site < up_target
    """
    _check_ordering(from_site, up_target, down_barrier)
    acceptance = gamblers_ruin(from_site, up_target, down_barrier)
    if acceptance >= REJECTION_MIN_ACCEPTANCE:
        while True:
            path, _ = _run_until_barriers(from_site, down_barrier, up_target, rng)
            if path[-1] == up_target:
                break
    else:
        path = _h_transform_path(from_site, up_target, down_barrier, rng)
    return EmbeddedWalk(
        level=level_fine,
        start_site=from_site,
        path=path,
        stop_rule=StopRule.BARRIERS,
        exit_side=1,
    )


def coarsen_walk(walk: EmbeddedWalk) -> EmbeddedWalk:
    """
    The level-(n-1) embedded walk inside a level-n path

    Keeps the successive visits to even sites, dropping consecutive repeats.
    """
    if walk.level < 1:
        raise ValidationError("Cannot coarsen a level-0 walk")
    if walk.start_site % 2:
        raise ValidationError("Coarsening needs an even start site")
    coarse_path = walk.path[_coarse_times(walk)] // 2
    return EmbeddedWalk(
        level=walk.level - 1,
        start_site=walk.start_site // 2,
        path=coarse_path,
        stop_rule=walk.stop_rule,
        exit_side=walk.exit_side,
    )


def _coarse_times(walk: EmbeddedWalk) -> np.ndarray:
    even_times = np.flatnonzero(walk.path % 2 == 0)
    even_sites = walk.path[even_times]
    keep = np.concatenate(([True], even_sites[1:] != even_sites[:-1]))
    return even_times[keep]


def coarse_step_durations(walk: EmbeddedWalk) -> np.ndarray:
    """Number of fine steps taken during each coarse step"""
    return np.diff(_coarse_times(walk))


def coarse_crossing_times(walk: EmbeddedWalk, coarsening: int) -> np.ndarray:
    """Step indices at which the path moves to a new multiple of 2^coarsening"""
    if coarsening < 0:
        raise ValidationError("coarsening must be non-negative")
    factor = 1 << coarsening
    on_grid = np.flatnonzero(walk.path % factor == 0)
    sites = walk.path[on_grid]
    keep = np.concatenate(([True], sites[1:] != sites[:-1]))
    return on_grid[keep]


def walk_segments(walk: EmbeddedWalk, cut_times: Sequence[int]) -> List[np.ndarray]:
    """
    Visit counts of the time segments between consecutive cut times

    Segments are half-open [t_i, t_i+1) except the last, which keeps the
    final site, so the segment counts add up to walk.visits exactly. Every
    array is aligned with walk.visits.
    """
    bounds = sorted({0, *[int(t) for t in cut_times if 0 < t <= walk.n_steps]})
    bounds.append(walk.path.size)
    offset = walk.path - walk.min_site
    size = walk.visits.size
    segments = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        segments.append(np.bincount(offset[lo:hi], minlength=size))
    return segments


def local_time_rows(field_: LocalTimeField) -> List[Tuple[int, float, float]]:
    """(site, x, L_hat) rows"""
    rows = zip(field_.sites, field_.x, field_.values)
    return [(int(s), float(x), float(v)) for s, x, v in rows]


# Green profile


def _green_work(level: int, seed: int, item: WorkItem) -> np.ndarray:
    rng = RngStream(seed, item.stream_id, (StreamTag.GREEN,))
    bound = 1 << level
    totals = np.zeros(2 * bound + 1)
    for _ in range(item.n_samples):
        walk = simulate_exit_walk(level, 0, rng)
        first = walk.min_site + bound
        totals[first : first + walk.visits.size] += walk.visits
    return totals


def mean_local_time_profile(
    level: int, n_runs: int, seed: int, queue: WorkQueue = SERIAL
) -> LocalTimeField:
    """Mean L over exit walks from 0, on sites -2^level..2^level"""
    items = split_budget(n_runs)
    totals = sum(queue.map(partial(_green_work, level, seed), items))
    bound = 1 << level
    sites = np.arange(-bound, bound + 1)
    values = totals / n_runs * 2.0**-level
    return LocalTimeField(level=level, sites=sites, values=values)


def green_function_error(profile: LocalTimeField) -> float:
    """Sup over sites of |mean L(x) - (1 - |x|)|"""
    return float(np.max(np.abs(profile.values - (1.0 - np.abs(profile.x)))))


# Exit-time tails


class ExitSide(str, Enum):
    MIN = "min"
    MAX = "max"


def _exit_probe_work(
    bound: int,
    a: float,
    side: ExitSide,
    m_walks: int,
    seed: int,
    item: WorkItem,
) -> int:
    rng = RngStream(seed, item.stream_id, (StreamTag.EXIT_PROBE,))
    # a x^2 in steps of duration 4^-level, with x = bound 2^-level
    scaled = a * float(bound) ** 2
    hits = 0
    for _ in range(item.n_samples):
        if side is ExitSide.MIN:
            # some walk exits within floor(a x^2 4^n) steps
            limit = math.floor(scaled)
            event = False
            for _ in range(m_walks):
                if limit >= 1:
                    _, exited = _run_until_barriers(
                        0, -bound, bound, rng, limit, raise_on_limit=False
                    )
                    event = event or exited
            hits += int(event)
        else:
            # some walk is still inside after ceil(a x^2 4^n) - 1 steps
            limit = max(math.ceil(scaled) - 1, 0)
            event = False
            for _ in range(m_walks):
                if limit == 0:
                    event = True
                    continue
                _, exited = _run_until_barriers(
                    0, -bound, bound, rng, limit, raise_on_limit=False
                )
                event = event or not exited
            hits += int(event)
    return hits


def exit_time_tail_probe(
    level: int,
    x_scale: float,
    a: float,
    n_runs: int,
    side: ExitSide,
    m_walks: int,
    seed: int,
    queue: WorkQueue = SERIAL,
) -> BernoulliEstimate:
    """
    Estimate P{min_j sigma_j(x) <= a x^2} (side=min) or
    P{max_j sigma_j(x) >= a x^2} (side=max)

    Each of the m walks starts at 0 on the grid 2^-level and runs until it
    leaves (-x_scale, x_scale), so x_scale * 2^level must be a whole number
    of sites. Each step lasts 4^-level, so the event is decided on step
    counts against a x_scale^2 4^level.

    Raises:
        ValidationError: If a parameter is not positive or x_scale is off the grid
    """
    if level < 0 or x_scale <= 0.0 or a <= 0.0 or n_runs < 1 or m_walks < 1:
        raise ValidationError("exit_time_tail_probe needs positive parameters")
    sites = x_scale * 2.0**level
    bound = int(round(sites))
    if bound < 1 or not math.isclose(sites, bound, rel_tol=0.0, abs_tol=1e-9):
        raise ValidationError(
            f"x_scale {x_scale:g} is not a positive multiple of 2^-{level}"
        )
    side = ExitSide(side)
    items = split_budget(n_runs)
    hits = queue.map(partial(_exit_probe_work, bound, a, side, m_walks, seed), items)
    return pool_counts(hits, [item.n_samples for item in items])


def exit_tail_reflection_bound(a: float) -> float:
    """4 P{Z > 1/(2 sqrt(a))} for a standard normal Z"""
    if a <= 0.0:
        raise ValidationError("a must be positive")
    return float(4.0 * stats.norm.sf(1.0 / (2.0 * math.sqrt(a))))


def fit_exit_tail_decay(
    points: Sequence[Tuple[float, float]], side: ExitSide
) -> RegressionFit:
    """
    Log-linear decay of the exit-time probe

    side=min regresses log P on 1/a, side=max regresses log P on a; minus
    the slope is reported as exit_tail_beta.
    """
    usable = usable_points(list(points))
    if ExitSide(side) is ExitSide.MIN:
        usable = [(1.0 / a, p) for a, p in usable]
    return fit_log_linear(usable)
