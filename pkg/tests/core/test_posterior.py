import math

import numpy as np
import pytest
from scipy import stats

from pbmbandits.core.posterior import (
    ArmPosterior,
    SamplerDiagnostics,
    log_density_unnorm,
    log_envelope,
    log_proposal_ratio,
    posterior_envelopes,
    sample,
    sample_arms,
)
from pbmbandits.core.utils.config import ENVELOPE_MARGIN
from pbmbandits.test_utils.model_utils import make_counters

# (alpha, beta, kappa): zero-count, low-count and high-count cases drawn from plausible
# click data, including positions never observed
POSTERIOR_BATTERY = [
    ((0,), (0,), (1.0,)),
    ((0, 0, 0), (0, 0, 0), (0.9, 0.6, 0.3)),
    ((1,), (1,), (1.0,)),
    ((5, 2), (15, 8), (0.9, 0.6)),
    ((0, 1, 1), (1, 0, 0), (0.9, 0.6, 0.3)),
    ((1, 0, 0), (0, 1, 1), (0.9, 0.6, 0.3)),
    ((0,), (12,), (0.7,)),
    ((3,), (0,), (0.8,)),
    ((32, 21, 10), (68, 79, 90), (0.9, 0.6, 0.3)),
    ((360, 240, 120), (640, 760, 880), (0.9, 0.6, 0.3)),
    ((9, 0, 0), (91, 0, 0), (0.9, 0.6, 0.3)),
    ((0, 0, 3), (0, 0, 97), (0.9, 0.6, 0.3)),
    ((2, 3), (18, 37), (0.5, 0.4)),
    ((18, 14), (7, 11), (1.0, 0.8)),
    ((85, 60, 31), (15, 40, 69), (0.95, 0.7, 0.35)),
    ((1, 1, 0), (9, 14, 20), (0.9, 0.6, 0.3)),
    ((30,), (70,), (0.5,)),
    ((7, 5), (3, 15), (0.9, 0.5)),
    ((0, 2), (30, 28), (0.9, 0.6)),
    ((150, 0), (350, 0), (0.9, 0.6)),
]


def _grid_cdf(posterior: ArmPosterior, size: int = 1_000_000):
    edges = np.linspace(0.0, 1.0, size + 1)
    midpoints = 0.5 * (edges[:-1] + edges[1:])
    with np.errstate(divide="ignore"):
        log_density = log_density_unnorm(posterior, midpoints)
    weights = np.exp(log_density - np.max(log_density))
    cumulative = np.concatenate([[0.0], np.cumsum(weights)])
    cumulative /= cumulative[-1]
    return lambda x: np.interp(x, edges, cumulative)


def test_log_density():
    posterior = ArmPosterior(alpha=(2, 1), beta=(3, 0), kappa=(0.9, 0.6))
    expected = 3 * math.log(0.3) + 3 * math.log(0.73)
    assert log_density_unnorm(posterior, 0.3) == pytest.approx(expected, abs=1e-9)
    assert log_density_unnorm(posterior, 0.3) == pytest.approx(-4.556051, abs=1e-6)


def test_log_density_flat_and_beta_kernel():
    flat = ArmPosterior(alpha=(0, 0), beta=(0, 0), kappa=(0.9, 0.6))
    np.testing.assert_array_equal(log_density_unnorm(flat, np.linspace(0, 1, 11)), 0.0)
    beta_kernel = ArmPosterior(alpha=(1,), beta=(1,), kappa=(1.0,))
    for theta in (0.1, 0.5, 0.8):
        assert log_density_unnorm(beta_kernel, theta) == pytest.approx(
            math.log(theta) + math.log(1 - theta)
        )


def test_log_density_boundaries():
    posterior = ArmPosterior(alpha=(1,), beta=(2,), kappa=(1.0,))
    with np.errstate(divide="ignore"):
        assert log_density_unnorm(posterior, 0.0) == -math.inf
        assert log_density_unnorm(posterior, 1.0) == -math.inf


def test_posterior_from_counters():
    counters = make_counters((0.9, 0.6), [[10, 4], [0, 0]], [[3, 1], [0, 0]])
    posterior = ArmPosterior.from_counters(counters, 0)
    assert posterior == ArmPosterior(alpha=(3, 1), beta=(7, 3), kappa=(0.9, 0.6))
    assert posterior.proposal_position == 0
    with pytest.raises(ValueError, match=r"same length"):
        ArmPosterior(alpha=(1,), beta=(1, 2), kappa=(0.9,))


@pytest.mark.parametrize(("alpha", "beta", "kappa"), POSTERIOR_BATTERY)
def test_envelope_dominates_ratio(alpha, beta, kappa):
    posterior = ArmPosterior(alpha, beta, kappa)
    points = np.random.default_rng(0).uniform(0.0, 1.0, size=100_000)
    with np.errstate(divide="ignore"):
        ratios = log_proposal_ratio(posterior, points)
    assert np.all(ratios <= log_envelope(posterior))


@pytest.mark.parametrize(("alpha", "beta", "kappa"), POSTERIOR_BATTERY)
def test_envelope_is_tight(alpha, beta, kappa):
    posterior = ArmPosterior(alpha, beta, kappa)
    with np.errstate(divide="ignore"):
        ratios = log_proposal_ratio(posterior, np.linspace(0.0, 1.0, 1_000_001))
    peak = log_envelope(posterior) - ENVELOPE_MARGIN
    assert peak >= np.max(ratios) - 1e-9
    assert peak <= np.max(ratios) + 1e-3


def test_uniform_without_observations():
    posterior = ArmPosterior(alpha=(0, 0, 0), beta=(0, 0, 0), kappa=(0.9, 0.6, 0.3))
    rng = np.random.default_rng(1)
    draws = [sample(posterior, rng) for _ in range(10_000)]
    assert stats.kstest(draws, "uniform").statistic < 0.02


def test_beta_two_two():
    posterior = ArmPosterior(alpha=(1,), beta=(1,), kappa=(1.0,))
    rng = np.random.default_rng(2)
    draws = [sample(posterior, rng) for _ in range(10_000)]
    assert stats.kstest(draws, stats.beta(2, 2).cdf).statistic < 0.02


def test_sampler_matches_grid_oracle():
    rng = np.random.default_rng(3)
    diagnostics = SamplerDiagnostics()
    for alpha, beta, kappa in POSTERIOR_BATTERY:
        posterior = ArmPosterior(alpha, beta, kappa)
        draws = np.array([sample(posterior, rng, diagnostics) for _ in range(20_000)])
        assert np.all((draws > 0) & (draws < 1))
        assert stats.kstest(draws, _grid_cdf(posterior)).statistic < 0.02, posterior
    assert diagnostics.draws == 20_000 * len(POSTERIOR_BATTERY)
    assert diagnostics.fallbacks == 0
    assert diagnostics.acceptance_rate > 0.01


def test_fallback_after_rejection_cap():
    posterior = ArmPosterior(alpha=(5, 2), beta=(15, 8), kappa=(0.9, 0.6))
    rng = np.random.default_rng(4)
    diagnostics = SamplerDiagnostics()
    draws = np.array(
        [sample(posterior, rng, diagnostics, max_rejections=0) for _ in range(10_000)]
    )
    assert diagnostics.fallbacks == 10_000
    assert diagnostics.proposals == 0
    assert stats.kstest(draws, _grid_cdf(posterior)).statistic < 0.02


def test_diagnostics_merge():
    merged = SamplerDiagnostics(2, 5, 1).merge(SamplerDiagnostics(3, 4, 0))
    assert merged == SamplerDiagnostics(5, 9, 1)
    assert merged.to_dict() == {
        "draws": 5,
        "proposals": 9,
        "fallbacks": 1,
        "acceptance_rate": pytest.approx(4 / 9),
    }


# rows of the battery that share kappa = (0.9, 0.6, 0.3)
ARM_ROWS = [
    (alpha, beta) for alpha, beta, kappa in POSTERIOR_BATTERY if kappa == (0.9, 0.6, 0.3)
]


def _battery_counters():
    plays = [[a + b for a, b in zip(alpha, beta)] for alpha, beta in ARM_ROWS]
    clicks = [list(alpha) for alpha, _ in ARM_ROWS]
    return make_counters((0.9, 0.6, 0.3), plays, clicks)


def test_posterior_envelopes_per_arm():
    counters = _battery_counters()
    envelopes = posterior_envelopes(counters)
    assert envelopes.shape == (len(ARM_ROWS),)
    for arm, (alpha, beta) in enumerate(ARM_ROWS):
        assert envelopes[arm] == log_envelope(ArmPosterior(alpha, beta, (0.9, 0.6, 0.3)))
    np.testing.assert_array_equal(posterior_envelopes(counters, [2, 0]), envelopes[[2, 0]])


def test_sample_arms_matches_grid_oracle():
    counters = _battery_counters()
    rng = np.random.default_rng(5)
    diagnostics = SamplerDiagnostics()
    envelopes = posterior_envelopes(counters)
    draws = np.array([sample_arms(counters, rng, envelopes, diagnostics) for _ in range(20_000)])
    assert draws.shape == (20_000, len(ARM_ROWS))
    assert np.all((draws > 0) & (draws < 1))
    for arm in range(len(ARM_ROWS)):
        oracle = _grid_cdf(ArmPosterior.from_counters(counters, arm))
        assert stats.kstest(draws[:, arm], oracle).statistic < 0.02, ARM_ROWS[arm]
    assert diagnostics.draws == 20_000 * len(ARM_ROWS)
    assert diagnostics.fallbacks == 0
    assert diagnostics.proposals >= diagnostics.draws


def test_sample_arms_fallback_after_rejection_cap(caplog):
    counters = make_counters((0.9, 0.6), [[20, 10], [0, 0]], [[5, 2], [0, 0]])
    rng = np.random.default_rng(6)
    diagnostics = SamplerDiagnostics()
    draws = np.array(
        [sample_arms(counters, rng, diagnostics=diagnostics, max_rejections=0) for _ in range(2000)]
    )
    assert diagnostics.fallbacks == 4000
    assert diagnostics.proposals == 0
    assert "falling back to grid inverse-CDF sampling" in caplog.text
    oracle = _grid_cdf(ArmPosterior.from_counters(counters, 0))
    assert stats.kstest(draws[:, 0], oracle).statistic < 0.05
    assert stats.kstest(draws[:, 1], "uniform").statistic < 0.05
