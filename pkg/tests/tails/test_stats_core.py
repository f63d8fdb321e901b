"""
Test random streams, Wilson intervals, exponent fits and KS helpers
"""

import math

import numpy as np
import pytest

from src.tails.exceptions import DegenerateInputError, ValidationError
from src.tails.stats_core import (
    RngStream,
    StreamTag,
    estimate_from_flags,
    fit_log_linear,
    fit_power_law,
    fit_stretched_exponent,
    ks_statistic,
    ks_threshold,
    merge_estimates,
    pool_counts,
    usable_points,
    wilson_interval,
)


def test_rng_stream_is_reproducible() -> None:
    """Test the same (seed, stream_id) yields the same draws"""
    a = RngStream(seed=7, stream_id=3).generator.random(5)
    b = RngStream(seed=7, stream_id=3).generator.random(5)
    c = RngStream(seed=7, stream_id=4).generator.random(5)

    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_stream_children_differ(rng: RngStream) -> None:
    first = rng.child(0).generator.random(4)
    second = rng.child(1).generator.random(4)
    assert not np.array_equal(first, second)
    np.testing.assert_array_equal(first, rng.child(0).generator.random(4))


def test_stream_tags_give_disjoint_draws() -> None:
    """Test operations tagged differently never replay each other's draws"""
    draws = [
        RngStream(7, 0, (tag, 5)).generator.random(8) for tag in StreamTag
    ]

    for i, first in enumerate(draws):
        for second in draws[i + 1 :]:
            assert not np.array_equal(first, second)


def test_rng_stream_sub_key_normalised() -> None:
    stream = RngStream(7, 0, (StreamTag.SAMPLE, np.int64(3)))
    assert stream.sub_key == (0, 3)
    assert all(type(k) is int for k in stream.sub_key)


def test_rng_stream_rejects_negative_seed() -> None:
    with pytest.raises(ValidationError):
        RngStream(seed=-1)


def test_wilson_interval_half() -> None:
    """Test 5 successes out of 10 at 95%"""
    estimate = wilson_interval(5, 10)

    assert estimate.p_hat == 0.5
    assert estimate.ci_low == pytest.approx(0.2366, abs=1e-4)
    assert estimate.ci_high == pytest.approx(0.7634, abs=1e-4)


def test_wilson_interval_extremes() -> None:
    none = wilson_interval(0, 20)
    every = wilson_interval(20, 20)

    assert none.ci_low == 0.0
    assert 0.0 < none.ci_high < 1.0
    assert every.ci_high == 1.0
    assert 0.0 < every.ci_low < 1.0


@pytest.mark.parametrize("p", [0.01, 0.5])
def test_wilson_interval_coverage(p: float) -> None:
    """Test the 95% interval covers the true p in at least 93% of repeats"""
    draws = np.random.default_rng(2024).binomial(1000, p, size=2000)
    estimates = [wilson_interval(int(k), 1000) for k in draws]
    covered = [est.ci_low <= p <= est.ci_high for est in estimates]
    assert np.mean(covered) >= 0.93


def test_wilson_interval_other_confidence() -> None:
    narrow = wilson_interval(30, 100, confidence=0.8)
    wide = wilson_interval(30, 100)
    assert wide.ci_low < narrow.ci_low < 0.3 < narrow.ci_high < wide.ci_high


@pytest.mark.parametrize("successes,trials", [(1, 0), (-1, 10), (11, 10)])
def test_wilson_interval_invalid_counts(successes: int, trials: int) -> None:
    with pytest.raises(ValidationError):
        wilson_interval(successes, trials)


def test_merge_equals_pooled_counts() -> None:
    """Test merging estimates is the same as estimating the pooled counts"""
    parts = [wilson_interval(3, 40), wilson_interval(7, 60), wilson_interval(0, 5)]
    assert merge_estimates(parts) == wilson_interval(10, 105)


def test_pool_counts_matches_merge() -> None:
    assert pool_counts([3, 7, 0], [40, 60, 5]) == wilson_interval(10, 105)


def test_merge_rejects_mixed_confidence() -> None:
    with pytest.raises(ValidationError) as exc_info:
        wilson_interval(1, 10).merge(wilson_interval(1, 10, confidence=0.9))
    assert "confidence" in str(exc_info.value)


def test_estimate_from_flags() -> None:
    estimate = estimate_from_flags([True, False, True, True])
    assert (estimate.successes, estimate.trials) == (3, 4)


def test_power_law_exact_points() -> None:
    """Test exact power-law points give the exponent with zero stderr"""
    points = [(eps, 0.5 * eps**2) for eps in (0.5, 0.25, 0.125, 0.0625)]
    fit = fit_power_law(points)

    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.slope_stderr == 0.0
    assert fit.r_squared == 1.0
    assert fit.n_points == 4


def test_power_law_weighted_matches_unweighted_on_exact_data() -> None:
    points = [(eps, eps**1.5) for eps in (0.4, 0.2, 0.1)]
    fit = fit_power_law(points, weights=[1.0, 4.0, 9.0])
    assert fit.slope == pytest.approx(1.5, abs=1e-12)


def test_stretched_exponent_exact_points() -> None:
    points = [(eps, math.exp(-2.0 * eps**-1.5)) for eps in (0.5, 0.4, 0.3)]
    fit = fit_stretched_exponent(points)
    assert fit.slope == pytest.approx(-1.5, abs=1e-9)


def test_stretched_exponent_rejects_large_probabilities() -> None:
    with pytest.raises(ValidationError):
        fit_stretched_exponent([(0.5, 0.5), (0.4, 0.1), (0.3, 0.01)])


def test_power_law_recovers_slope_from_noisy_points() -> None:
    rng = np.random.default_rng(3)
    eps = np.geomspace(0.5, 0.01, 12)
    p = 0.3 * eps**1.7 * np.exp(rng.normal(0.0, 0.05, size=eps.size))
    fit = fit_power_law(list(zip(eps, p)))

    assert fit.slope == pytest.approx(1.7, abs=0.1)
    assert fit.slope_stderr > 0.0
    assert fit.r_squared > 0.99


def test_log_linear_fit() -> None:
    points = [(a, 3.0 * math.exp(-0.7 * a)) for a in (1.0, 2.0, 3.0, 4.0)]
    fit = fit_log_linear(points)
    assert fit.slope == pytest.approx(-0.7, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)


def test_fit_needs_three_points() -> None:
    with pytest.raises(ValidationError) as exc_info:
        fit_power_law([(0.5, 0.1), (0.25, 0.01)])
    assert "At least 3 points" in str(exc_info.value)


def test_fit_degenerate_abscissae() -> None:
    with pytest.raises(DegenerateInputError):
        fit_power_law([(0.1, 0.2), (0.1, 0.3), (0.1, 0.4)])


def test_usable_points_drops_zero_and_one() -> None:
    kept = usable_points([(0.5, 1.0), (0.25, 0.3), (0.125, 0.0), (0.0625, 0.01)])
    assert kept == [(0.25, 0.3), (0.0625, 0.01)]


def test_ks_statistic_identical_and_disjoint() -> None:
    sample = np.linspace(0.0, 1.0, 50)
    assert ks_statistic(sample, sample) == 0.0
    assert ks_statistic(sample, sample + 10.0) == 1.0


def test_ks_statistic_shifted_grid() -> None:
    a = [1.0, 2.0, 3.0, 4.0]
    b = [1.5, 2.5, 3.5, 4.5]

    assert ks_statistic(a, b) == pytest.approx(0.25)
    assert ks_statistic(b, a) == pytest.approx(0.25)


def test_ks_statistic_invariant_under_monotone_maps() -> None:
    rng = np.random.default_rng(9)
    a = rng.normal(size=200)
    b = rng.normal(0.3, 1.2, size=150)
    base = ks_statistic(a, b)

    assert ks_statistic(b, a) == pytest.approx(base)
    assert ks_statistic(np.exp(a), np.exp(b)) == pytest.approx(base)
    assert ks_statistic(a**3, b**3) == pytest.approx(base)


def test_ks_statistic_empty_sample() -> None:
    with pytest.raises(ValidationError):
        ks_statistic([], [1.0])


def test_ks_threshold_value() -> None:
    assert ks_threshold(100, 100) == pytest.approx(1.63 * math.sqrt(0.02))
    assert ks_threshold(100, 100) == pytest.approx(0.23052, abs=1e-5)
