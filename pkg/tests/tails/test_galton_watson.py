"""
Test Galton-Watson simulation, conditioned draws and the density solver
"""

import math

import numpy as np
import pytest
from scipy import stats

from src.tails.exceptions import (
    InvalidRegimeError,
    OutOfRangeError,
    ResourceLimitError,
    ValidationError,
)
from src.tails.galton_watson import (
    GridSpec,
    density_fixed_point,
    density_rows,
    minimal_growth_log_probability,
    sample_W,
    sample_W_conditioned_minimal_many,
    sample_W_conditioned_single_many,
    sample_W_many,
    simulate_generations,
    single_line_log_probability,
    smoothing_step,
    tail_from_density,
)
from src.tails.gw_tails import default_epsilon_grid
from src.tails.offspring import OffspringDistribution, derive_params
from src.tails.stats_core import RngStream, ks_against_cdf


def test_simulate_generations_grows(
    boettcher: OffspringDistribution, rng: RngStream
) -> None:
    """Test every individual has at least two children under a 2-or-3 law"""
    trace = simulate_generations(boettcher, 6, rng)

    assert trace.depth == 6
    assert trace.sizes[0] == 1
    for previous, current in zip(trace.sizes, trace.sizes[1:]):
        assert 2 * previous <= current <= 3 * previous


def test_simulate_generations_size_cap(rng: RngStream) -> None:
    doubling = OffspringDistribution.parse("pmf: 2:1.0")

    with pytest.raises(ResourceLimitError) as exc_info:
        simulate_generations(doubling, 10, rng, size_cap=10)
    assert exc_info.value.limit == 10
    assert exc_info.value.exit_code == 4


def test_simulate_generations_rejects_extinction(rng: RngStream) -> None:
    with pytest.raises(ValidationError) as exc_info:
        simulate_generations(OffspringDistribution.parse("pmf: 0:0.25, 2:0.75"), 3, rng)
    assert "prune" in str(exc_info.value)


def test_sample_W_geometric_is_exponential(geometric: OffspringDistribution) -> None:
    """Test the geometric(1/2) martingale limit against Exp(1)"""
    samples = sample_W_many(geometric, 20, 4000, RngStream(seed=3))

    assert samples.shape == (4000,)
    assert samples.mean() == pytest.approx(1.0, abs=0.1)
    assert ks_against_cdf(samples, stats.expon.cdf) < 0.05


def test_sample_W_is_reproducible(schroeder: OffspringDistribution) -> None:
    first = sample_W(schroeder, 12, RngStream(seed=9, stream_id=2))
    second = sample_W(schroeder, 12, RngStream(seed=9, stream_id=2))
    assert first == second
    assert first > 0.0


def test_log_probabilities(
    schroeder: OffspringDistribution, boettcher: OffspringDistribution
) -> None:
    assert single_line_log_probability(schroeder, 4) == pytest.approx(4 * math.log(0.5))
    # 1 + 2 + 4 individuals must each have exactly two children
    expected = 7 * math.log(0.5)
    assert minimal_growth_log_probability(boettcher, 3) == pytest.approx(expected)

    with pytest.raises(InvalidRegimeError):
        single_line_log_probability(boettcher, 2)
    with pytest.raises(InvalidRegimeError):
        minimal_growth_log_probability(schroeder, 2)


def test_conditioned_minimal_draws(
    boettcher: OffspringDistribution, rng: RngStream
) -> None:
    """Test conditioning on minimal growth to depth k gives W_n at least 2^n / 2.5^n"""
    draws = sample_W_conditioned_minimal_many(boettcher, 3, 8, 200, rng)

    assert draws.shape == (200,)
    assert np.all(draws >= 2**8 / 2.5**8 - 1e-12)
    assert draws.mean() < 1.0


def test_conditioned_single_draws(
    schroeder: OffspringDistribution, rng: RngStream
) -> None:
    unconditioned = sample_W_many(schroeder, 12, 2000, RngStream(seed=4))
    conditioned = sample_W_conditioned_single_many(schroeder, 4, 12, 2000, rng)

    # conditioning on Z_4 = 1 scales the mean by 1.5^-4
    assert conditioned.mean() == pytest.approx(1.5**-4, rel=0.15)
    assert conditioned.mean() < unconditioned.mean()

    with pytest.raises(InvalidRegimeError):
        no_single_line = OffspringDistribution.parse("pmf: 2:0.5, 3:0.5")
        sample_W_conditioned_single_many(no_single_line, 2, 4, 5, rng)


def test_conditioned_depth_order(
    schroeder: OffspringDistribution, rng: RngStream
) -> None:
    with pytest.raises(ValidationError):
        sample_W_conditioned_single_many(schroeder, 5, 4, 10, rng)


def test_grid_spec_validation() -> None:
    with pytest.raises(ValidationError):
        GridSpec(x_min=1.0, x_switch=0.5)
    with pytest.raises(ValidationError):
        GridSpec(n_linear=0)


def test_grid_nodes_layout(small_grid: GridSpec) -> None:
    nodes = small_grid.nodes()
    edges = small_grid.edges()

    assert nodes[0] == 0.0
    assert nodes[1] == pytest.approx(small_grid.x_min)
    assert nodes[-1] == small_grid.x_max
    assert nodes.size == 1 + small_grid.n_geometric + small_grid.n_linear + 1
    assert edges.size == nodes.size + 1
    assert np.all(np.diff(nodes) > 0.0)
    assert 1.0 in nodes


def test_zero_iterations_is_point_mass(
    geometric: OffspringDistribution, small_grid: GridSpec
) -> None:
    grid = density_fixed_point(geometric, small_grid, iterations=0)

    assert grid.masses.sum() == pytest.approx(1.0)
    assert grid.mean == pytest.approx(1.0)
    assert tail_from_density(grid, 0.9) == 0.0
    assert tail_from_density(grid, 1.0) == pytest.approx(0.5)
    assert tail_from_density(grid, 2.0) == pytest.approx(1.0)


def test_density_geometric_matches_exponential(
    geometric: OffspringDistribution, small_grid: GridSpec
) -> None:
    """Test the solved law of W for geometric(1/2) against 1 - exp(-x)"""
    grid = density_fixed_point(geometric, small_grid, iterations=25)

    assert grid.masses.sum() == pytest.approx(1.0, abs=1e-9)
    assert grid.mean == pytest.approx(1.0, rel=1e-6)
    for x in (0.1, 0.5, 1.0, 2.0):
        assert tail_from_density(grid, x) == pytest.approx(1.0 - math.exp(-x), abs=0.01)


def test_tail_is_monotone(
    schroeder: OffspringDistribution, small_grid: GridSpec
) -> None:
    grid = density_fixed_point(schroeder, small_grid, iterations=30)
    tails = [tail_from_density(grid, x) for x in np.geomspace(1e-4, 10.0, 40)]
    assert all(b >= a for a, b in zip(tails, tails[1:]))


def test_tail_out_of_range(
    geometric: OffspringDistribution, small_grid: GridSpec
) -> None:
    grid = density_fixed_point(geometric, small_grid, iterations=0)

    with pytest.raises(OutOfRangeError):
        tail_from_density(grid, 0.0)
    with pytest.raises(OutOfRangeError):
        tail_from_density(grid, small_grid.x_max + 1.0)


def test_density_cost_budget(geometric: OffspringDistribution) -> None:
    with pytest.raises(ResourceLimitError) as exc_info:
        density_fixed_point(geometric, iterations=60, cost_budget=1.0)
    assert "pair evaluations" in str(exc_info.value)


def test_density_iteration_cap_flags_non_convergence(
    schroeder: OffspringDistribution, small_grid: GridSpec
) -> None:
    grid = density_fixed_point(schroeder, small_grid, iterations=2)
    assert not grid.converged
    assert grid.notes


def test_smoothing_step_advances(
    schroeder: OffspringDistribution, small_grid: GridSpec
) -> None:
    grid = density_fixed_point(schroeder, small_grid, iterations=40)
    stepped = smoothing_step(grid, schroeder)

    assert stepped.iterations == 41
    assert stepped.last_tv < 0.01
    assert stepped.masses.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("law", ["geometric", "schroeder"])
def test_converged_density_is_self_consistent(
    law: str, request: pytest.FixtureRequest, small_grid: GridSpec
) -> None:
    """Test one more smoothing step moves every grid tail by less than 1e-4"""
    dist = request.getfixturevalue(law)
    grid = density_fixed_point(dist, small_grid, iterations=40)
    stepped = smoothing_step(grid, dist)

    for eps in default_epsilon_grid(derive_params(dist)):
        before = tail_from_density(grid, eps)
        assert abs(tail_from_density(stepped, eps) - before) < 1e-4


def test_density_rows(geometric: OffspringDistribution, small_grid: GridSpec) -> None:
    grid = density_fixed_point(geometric, small_grid, iterations=5)
    rows = density_rows(grid)

    assert len(rows) == grid.masses.size
    assert rows[0][0] == 0.0
    assert rows[-1][1] == small_grid.x_max
    assert sum(mass for _, _, mass in rows) == pytest.approx(1.0)
