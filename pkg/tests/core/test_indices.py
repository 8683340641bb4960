import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from pbmbandits.core.indices import (
    klucb_indices,
    klucb_scalar,
    phi,
    phi_min,
    phi_profile,
    pie_index,
    pie_index_at_least,
    pie_indices_at_least,
    ucb_index,
    ucb_indices,
)
from pbmbandits.core.model import kl_bernoulli
from pbmbandits.core.stats import CounterSet, theta_hat
from pbmbandits.test_utils.model_utils import make_counters, simulate_allocation


def _random_counters(rng: np.random.Generator, positions: int = 3) -> CounterSet:
    kappa = np.sort(rng.uniform(0.1, 0.95, size=positions))[::-1]
    theta = rng.uniform(0.05, 0.95)
    plays = rng.integers(0, 40, size=(1, positions))
    plays[0, 0] += 1
    clicks = rng.binomial(plays, kappa * theta)
    return make_counters(kappa, plays, clicks)


def _scalar_root(successes: int, trials: int, kappa: float, delta: float) -> float:
    p = successes / trials
    upper = 1.0 - 1e-15
    return brentq(
        lambda q: trials * kl_bernoulli(p, kappa * q) - delta, p / kappa, upper, xtol=1e-14
    )


def test_ucb_index():
    counters = make_counters((0.9,), [[10]], [[5]])
    assert ucb_index(counters, 0, 2.0) == pytest.approx(0.906920, abs=1e-6)
    assert ucb_index(counters, 0, 0.0) == theta_hat(counters, 0)


def test_ucb_index_requires_data():
    counters = make_counters((0.9, 0.6), [[1, 0], [0, 0]], [[0, 0], [0, 0]])
    with pytest.raises(ValueError, match=r"No data for arm 1"):
        ucb_index(counters, 1, 1.0)
    with pytest.raises(ValueError, match=r"No data for arms \[1\]"):
        ucb_indices(counters, 1.0)
    with pytest.raises(ValueError, match=r"Invalid delta"):
        ucb_index(counters, 0, -1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), delta=st.floats(0.0, 30.0))
def test_ucb_index_dominates_estimate(seed, delta):
    counters = _random_counters(np.random.default_rng(seed))
    assert ucb_index(counters, 0, delta) >= theta_hat(counters, 0)


def test_phi_vanishes_at_matched_means():
    counters = make_counters((0.8, 0.4), [[10, 10]], [[4, 2]])
    assert phi(counters, 0, 0.5) == pytest.approx(0.0, abs=1e-12)


def test_phi_without_plays():
    counters = CounterSet((0.8, 0.4), num_arms=1)
    for q in np.linspace(0, 1, 11):
        assert phi(counters, 0, q) == 0.0


def test_phi_is_convex():
    rng = np.random.default_rng(5)
    qs = np.linspace(1e-3, 0.999, 2_000)
    for _ in range(20):
        counters = _random_counters(rng)
        values = np.array([phi(counters, 0, q) for q in qs])
        assert np.all(np.diff(values, 2) >= -1e-9)


def test_phi_profile_matches_scalar():
    rng = np.random.default_rng(8)
    plays = rng.integers(1, 30, size=(6, 3))
    clicks = rng.binomial(plays, 0.3)
    counters = make_counters((0.9, 0.6, 0.3), plays, clicks)
    qs = rng.uniform(0.05, 0.95, size=6)
    expected = [phi(counters, k, q) for k, q in enumerate(qs)]
    np.testing.assert_allclose(phi_profile(counters, qs), expected, rtol=1e-12)


@pytest.mark.parametrize(
    ("plays", "clicks", "kappa", "expected"),
    [
        (20, 5, 0.5, 0.5),
        (20, 15, 0.5, 1.0),
        (30, 6, 0.8, 0.25),
        (10, 0, 0.9, 0.0),
    ],
)
def test_phi_min_single_position(plays, clicks, kappa, expected):
    counters = make_counters((kappa,), [[plays]], [[clicks]])
    theta_min, value = phi_min(counters, 0)
    assert theta_min == pytest.approx(expected, abs=1e-8)
    if expected < 1.0:
        assert value == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize(
    ("plays", "clicks", "kappa"),
    [
        ((10, 10), (4, 2), (0.8, 0.4)),
        ((10, 10), (5, 1), (0.8, 0.4)),
        ((25, 3, 40), (9, 1, 2), (0.9, 0.6, 0.3)),
        ((5, 5), (5, 0), (0.9, 0.6)),
    ],
)
def test_phi_min_matches_grid_search(plays, clicks, kappa):
    counters = make_counters(kappa, [plays], [clicks])
    grid = np.linspace(0.0, 1.0, 1_000_001)
    plays_arr, clicks_arr, kappa_arr = (np.array(x, dtype=float) for x in (plays, clicks, kappa))
    with np.errstate(divide="ignore", invalid="ignore"):
        values = sum(
            n * np.array([kl_bernoulli(s / n, k * q) for q in grid[::1000]])
            for n, s, k in zip(plays_arr, clicks_arr, kappa_arr)
        )
    coarse = grid[::1000][int(np.argmin(values))]
    fine = grid[(grid >= coarse - 1e-3) & (grid <= coarse + 1e-3)]
    fine_values = sum(
        n * np.array([kl_bernoulli(s / n, k * q) for q in fine])
        for n, s, k in zip(plays_arr, clicks_arr, kappa_arr)
    )
    oracle = fine[int(np.argmin(fine_values))]
    theta_min, value = phi_min(counters, 0)
    assert theta_min == pytest.approx(oracle, abs=1e-5)
    assert value == pytest.approx(phi(counters, 0, theta_min))


def test_phi_min_requires_data():
    with pytest.raises(ValueError, match=r"No data for arm 0"):
        phi_min(CounterSet((0.9,), 1), 0)


def test_pie_index_single_position():
    counters = make_counters((1.0,), [[20]], [[5]])
    result = pie_index(counters, 0, 2.0)
    assert result.value == pytest.approx(0.4677, abs=1e-3)
    assert result.value == pytest.approx(_scalar_root(5, 20, 1.0, 2.0), abs=1e-6)
    assert not result.at_boundary
    assert result.value == pytest.approx(klucb_scalar(0.25, 20, 2.0), abs=1e-6)


@pytest.mark.parametrize(
    ("plays", "clicks", "kappa", "delta"),
    [(30, 6, 0.6, 3.0), (50, 10, 0.3, 1.0), (12, 1, 0.9, 5.0)],
)
def test_pie_index_single_active_position(plays, clicks, kappa, delta):
    counters = make_counters((0.95, kappa), [[0, plays]], [[0, clicks]])
    expected = _scalar_root(clicks, plays, kappa, delta)
    assert pie_index(counters, 0, delta).value == pytest.approx(expected, abs=1e-6)


def test_pie_index_zero_delta_is_theta_min():
    counters = make_counters((0.9, 0.6), [[20, 10]], [[7, 2]])
    theta_min, _ = phi_min(counters, 0)
    assert pie_index(counters, 0, 0.0).value == theta_min


def test_pie_index_saturates():
    counters = make_counters((0.9, 0.6), [[3, 2]], [[2, 1]])
    result = pie_index(counters, 0, 50.0)
    assert result.value == 1.0
    assert result.at_boundary


def test_pie_index_monotone_and_certified():
    rng = np.random.default_rng(13)
    deltas = np.linspace(0.0, 20.0, 41)
    for _ in range(30):
        counters = _random_counters(rng)
        theta_min, _ = phi_min(counters, 0)
        values = []
        for delta in deltas:
            result = pie_index(counters, 0, delta)
            assert 0.0 <= result.value <= 1.0
            if result.at_boundary:
                assert result.value == 1.0
            elif theta_min < 1.0 and result.value > theta_min:
                assert phi(counters, 0, result.value) == pytest.approx(delta, abs=1e-6)
            values.append(result.value)
        assert np.all(np.diff(values) >= -1e-12)


def test_pie_index_at_least_agrees_with_index():
    rng = np.random.default_rng(17)
    for _ in range(50):
        counters = _random_counters(rng)
        delta = float(rng.uniform(0.5, 10.0))
        value = pie_index(counters, 0, delta).value
        for threshold in (value - 1e-6, value + 1e-6, 0.0, 1.0):
            expected = value >= threshold
            if 0.0 < threshold < 1.0 or threshold == 0.0:
                assert pie_index_at_least(counters, 0, delta, threshold) == expected


@pytest.mark.parametrize(
    ("p_hat", "n", "delta", "expected"),
    [
        (0.25, 20, 0.0, 0.25),
        (1.0, 5, 3.0, 1.0),
        (0.25, 20, 2.0, 0.4677),
    ],
)
def test_klucb_scalar(p_hat, n, delta, expected):
    assert klucb_scalar(p_hat, n, delta) == pytest.approx(expected, abs=1e-3)


def test_klucb_scalar_monotone_in_delta():
    rng = np.random.default_rng(19)
    for _ in range(30):
        p_hat = float(rng.uniform(0, 1))
        n = int(rng.integers(1, 200))
        values = [klucb_scalar(p_hat, n, delta) for delta in np.linspace(0, 15, 31)]
        assert np.all(np.diff(values) >= 0)


def test_klucb_indices_shape():
    p_hats = np.array([[0.1, 0.5], [0.0, 0.9]])
    counts = np.array([[10, 20], [5, 1]])
    indices = klucb_indices(p_hats, counts, 2.0)
    assert indices.shape == (2, 2)
    assert np.all(indices >= p_hats)
    assert indices[0, 0] == pytest.approx(klucb_scalar(0.1, 10, 2.0), abs=1e-9)


def test_ucb_coverage():
    rng = np.random.default_rng(101)
    theta, kappa, allocation = 0.3, (0.9, 0.6, 0.3), (100, 100, 100)
    counters = simulate_allocation(theta, kappa, allocation, 100_000, rng)
    delta = 6.0
    t = sum(allocation)
    violations = np.mean(ucb_indices(counters, delta) < theta)
    assert violations <= math.e * delta * math.log(t) * math.exp(-delta)


def test_pie_coverage():
    rng = np.random.default_rng(202)
    theta, kappa, allocation = 0.3, (0.9, 0.6, 0.3), (100, 100, 100)
    counters = simulate_allocation(theta, kappa, allocation, 100_000, rng)
    delta, L = 8.0, 3
    t = sum(allocation)
    below = ~pie_indices_at_least(counters, delta, theta)
    bound = math.e ** (L + 1) * (math.ceil(delta * math.log(t)) * delta / L) ** L
    assert np.mean(below) <= min(1.0, bound * math.exp(-delta))
    # the analytic bound is loose; the raw frequency stays small
    assert np.mean(below) <= 0.01
    for arm in range(0, 100_000, 1000):
        reached = pie_index_at_least(counters, arm, delta, theta)
        assert reached == (not below[arm])
        assert (pie_index(counters, arm, delta).value >= theta) == reached


def test_pie_indices_at_least_matches_scalar():
    rng = np.random.default_rng(29)
    kappa = np.array([0.9, 0.5, 0.2])
    plays = rng.integers(0, 60, size=(300, 3))
    plays[:, 0] += 1
    clicks = rng.binomial(plays, kappa * rng.uniform(0.05, 0.95, size=(300, 1)))
    counters = make_counters(kappa, plays, clicks)
    thresholds = rng.uniform(-0.1, 1.1, size=300)
    for delta in (0.5, 3.0, 12.0):
        flags = pie_indices_at_least(counters, delta, thresholds)
        expected = [
            pie_index_at_least(counters, arm, delta, threshold)
            for arm, threshold in enumerate(thresholds)
        ]
        assert flags.tolist() == expected
    assert pie_indices_at_least(counters, 3.0, 0.0).all()
    assert not pie_indices_at_least(counters, 3.0, 1.5).any()


def test_klucb_indices_solve_the_kl_equation():
    rng = np.random.default_rng(23)
    p_hats = rng.uniform(0.0, 0.98, size=(20, 15))
    p_hats[0] = 0.0
    counts = rng.integers(20, 5000, size=p_hats.shape)
    delta = 7.3
    indices = klucb_indices(p_hats, counts, delta)
    assert np.all(indices >= p_hats)
    assert np.all(indices < 1.0)
    for p, n, value in zip(p_hats.ravel(), counts.ravel(), indices.ravel()):
        expected = brentq(lambda q: n * kl_bernoulli(p, q) - delta, p, 1.0 - 1e-15, xtol=1e-14)
        assert value == pytest.approx(expected, abs=1e-10)
    # no successes: n d(0, q) = -n log(1 - q) has a closed-form root
    np.testing.assert_allclose(indices[0], 1.0 - np.exp(-delta / counts[0]), rtol=1e-10)


def test_klucb_indices_edge_cases():
    indices = klucb_indices(np.array([1.0, 0.4, 0.4]), np.array([3, 7, 7]), 0.0)
    np.testing.assert_allclose(indices, [1.0, 0.4, 0.4])
    # root close to 1, reached from a start next to the pole
    expected = brentq(lambda q: 20 * kl_bernoulli(0.98, q) - 7.3, 0.98, 1.0 - 1e-15, xtol=1e-15)
    assert klucb_scalar(0.98, 20, 7.3) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError, match=r"at least one observation"):
        klucb_indices(np.array([0.5, 0.2]), np.array([4, 0]), 1.0)
    with pytest.raises(ValueError, match=r"Invalid delta"):
        klucb_indices(np.array([0.5]), np.array([4]), -1.0)
