"""
Exact posterior of one attraction parameter under censored PBM feedback.

With a uniform prior the posterior density of theta_k is proportional to
prod_l theta^alpha_l (1 - kappa_l theta)^beta_l on (0, 1), where alpha_l counts clicks and
beta_l counts non-clicks at position l. Draws come from rejection sampling with a scaled
beta proposal built on the most observed position.
"""

import functools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import xlogy

from pbmbandits.core.envs.pbm_env_vars import PBM_BANDITS_MAX_REJECTIONS
from pbmbandits.core.stats import CounterSet
from pbmbandits.core.utils.config import (
    ENVELOPE_MARGIN,
    ENVELOPE_XTOL,
    FALLBACK_GRID_SIZE,
)
from pbmbandits.core.utils.validation_utils import validate_arm

_logger = logging.getLogger(__name__)

_BELOW_ONE = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class ArmPosterior:
    alpha: Tuple[int, ...]
    beta: Tuple[int, ...]
    kappa: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(int(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(int(b) for b in self.beta))
        object.__setattr__(self, "kappa", tuple(float(k) for k in self.kappa))
        if not len(self.alpha) == len(self.beta) == len(self.kappa):
            raise ValueError(
                f"alpha, beta and kappa must have the same length, got {len(self.alpha)}, "
                f"{len(self.beta)} and {len(self.kappa)}."
            )
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise ValueError("Posterior exponents must be nonnegative.")

    @classmethod
    def from_counters(cls, counters: CounterSet, arm: int) -> "ArmPosterior":
        validate_arm(arm, counters.num_arms)
        clicks = counters.clicks[arm]
        return cls(
            alpha=tuple(clicks),
            beta=tuple(counters.plays[arm] - clicks),
            kappa=tuple(counters.kappa),
        )

    @property
    def proposal_position(self) -> int:
        """The position with the most observations, ties to the smaller index."""
        totals = [a + b for a, b in zip(self.alpha, self.beta)]
        return totals.index(max(totals))


@dataclass
class SamplerDiagnostics:
    draws: int = 0
    proposals: int = 0
    fallbacks: int = 0

    @property
    def acceptance_rate(self) -> float:
        accepted = self.draws - self.fallbacks
        return accepted / self.proposals if self.proposals else 1.0

    def merge(self, other: "SamplerDiagnostics") -> "SamplerDiagnostics":
        return SamplerDiagnostics(
            draws=self.draws + other.draws,
            proposals=self.proposals + other.proposals,
            fallbacks=self.fallbacks + other.fallbacks,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "draws": self.draws,
            "proposals": self.proposals,
            "fallbacks": self.fallbacks,
            "acceptance_rate": self.acceptance_rate,
        }


def log_density_unnorm(
    posterior: ArmPosterior, theta: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """
    sum_l alpha_l log(theta) + beta_l log(1 - kappa_l theta).

    Returns -inf at theta = 0 when some alpha_l > 0 and where kappa_l theta = 1 with
    beta_l > 0. Accepts a scalar or an array of points.
    """
    points = np.asarray(theta, dtype=float)
    kappa = np.asarray(posterior.kappa)
    values = xlogy(sum(posterior.alpha), points)
    for beta_l, kappa_l in zip(posterior.beta, kappa):
        values = values + xlogy(beta_l, 1.0 - kappa_l * points)
    return float(values) if np.ndim(values) == 0 else values


def log_proposal_ratio(
    posterior: ArmPosterior, theta: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """
    Log of target kernel over proposal kernel at theta, both unnormalized.

    The proposal kernel of theta = X / kappa_m with X ~ Beta(alpha_m + 1, beta_m + 1) is
    (kappa_m theta)^alpha_m (1 - kappa_m theta)^beta_m; its factors cancel against the
    target's position-m factors, which keeps the ratio finite wherever the proposal lives.
    """
    m = posterior.proposal_position
    points = np.asarray(theta, dtype=float)
    other_clicks = sum(posterior.alpha) - posterior.alpha[m]
    values = xlogy(other_clicks, points) - xlogy(posterior.alpha[m], posterior.kappa[m])
    for l, (beta_l, kappa_l) in enumerate(zip(posterior.beta, posterior.kappa)):
        if l != m:
            values = values + xlogy(beta_l, 1.0 - kappa_l * points)
    return float(values) if np.ndim(values) == 0 else values


@functools.lru_cache(maxsize=4096)
def _ratio_terms(posterior: ArmPosterior) -> Tuple[int, float, Tuple[Tuple[int, float], ...]]:
    m = posterior.proposal_position
    other_clicks = sum(posterior.alpha) - posterior.alpha[m]
    offset = -posterior.alpha[m] * math.log(posterior.kappa[m])
    non_clicks = tuple(
        (beta_l, kappa_l)
        for l, (beta_l, kappa_l) in enumerate(zip(posterior.beta, posterior.kappa))
        if l != m and beta_l > 0
    )
    return other_clicks, offset, non_clicks


def _log_ratio_scalar(posterior: ArmPosterior, theta: float) -> float:
    other_clicks, value, non_clicks = _ratio_terms(posterior)
    if other_clicks:
        if theta <= 0.0:
            return -math.inf
        value += other_clicks * math.log(theta)
    for beta_l, kappa_l in non_clicks:
        remaining = 1.0 - kappa_l * theta
        if remaining <= 0.0:
            return -math.inf
        value += beta_l * math.log(remaining)
    return value


@functools.lru_cache(maxsize=4096)
def log_envelope(posterior: ArmPosterior) -> float:
    """
    Log envelope constant M with log target - log proposal <= M on (0, 1].

    The log ratio c log(theta) + sum_{l != m} beta_l log(1 - kappa_l theta) is concave: it
    peaks at the root of its decreasing derivative, or at an end of (0, 1]. The maximum is
    inflated by a 5% margin.
    """
    other_clicks, offset, non_clicks = _ratio_terms(posterior)
    if not non_clicks:
        return _log_ratio_scalar(posterior, 1.0) + ENVELOPE_MARGIN
    if not other_clicks:
        # supremum as theta -> 0
        return offset + ENVELOPE_MARGIN

    def slope(theta: float) -> float:
        return other_clicks / theta - math.fsum(
            beta_l * kappa_l / (1.0 - kappa_l * theta) for beta_l, kappa_l in non_clicks
        )

    upper = _BELOW_ONE
    if slope(upper) >= 0.0:
        return _log_ratio_scalar(posterior, 1.0) + ENVELOPE_MARGIN
    # the derivative is positive below c / (c + sum_l beta_l kappa_l)
    weight = math.fsum(beta_l * kappa_l for beta_l, kappa_l in non_clicks)
    lower = 0.5 * other_clicks / (other_clicks + weight)
    peak = brentq(slope, lower, upper, xtol=ENVELOPE_XTOL)
    return _log_ratio_scalar(posterior, peak) + ENVELOPE_MARGIN


def posterior_envelopes(counters: CounterSet, arms: Optional[Sequence[int]] = None) -> np.ndarray:
    """`log_envelope` of the posterior of each given arm, all arms by default."""
    arms = range(counters.num_arms) if arms is None else arms
    return np.array(
        [log_envelope(ArmPosterior.from_counters(counters, int(arm))) for arm in arms],
        dtype=float,
    )


def _grid_inverse_cdf(posterior: ArmPosterior, rng: np.random.Generator) -> float:
    cells = FALLBACK_GRID_SIZE
    midpoints = (np.arange(cells) + 0.5) / cells
    with np.errstate(divide="ignore"):
        log_density = log_density_unnorm(posterior, midpoints)
    weights = np.exp(log_density - np.max(log_density))
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    u = rng.random()
    cell = min(int(np.searchsorted(cdf, u, side="right")), cells - 1)
    previous = cdf[cell - 1] if cell > 0 else 0.0
    width = cdf[cell] - previous
    within = (u - previous) / width if width > 0 else 0.5
    return float((cell + min(max(within, 0.0), 1.0)) / cells)


def sample(
    posterior: ArmPosterior,
    rng: np.random.Generator,
    diagnostics: Optional[SamplerDiagnostics] = None,
    max_rejections: Optional[int] = None,
) -> float:
    """
    Draw theta from the exact posterior by rejection sampling.

    Proposals are X / kappa_m with X ~ Beta(alpha_m + 1, beta_m + 1), m the most observed
    position; proposals above 1 are rejected outright. After `max_rejections` rejections
    the draw falls back to inverse-CDF sampling on a grid of the exact density.

    Args:
        posterior: The arm posterior.
        rng: The random stream.
        diagnostics: Optional counters updated in place.
        max_rejections: Rejection cap. Defaults to PBM_BANDITS_MAX_REJECTIONS.

    Returns:
        float: A draw in (0, 1).
    """
    if max_rejections is None:
        max_rejections = PBM_BANDITS_MAX_REJECTIONS.get_int()
    m = posterior.proposal_position
    a, b = posterior.alpha[m] + 1, posterior.beta[m] + 1
    kappa_m = posterior.kappa[m]
    envelope = log_envelope(posterior)
    proposals = 0
    while proposals < max_rejections:
        proposals += 1
        theta = rng.beta(a, b) / kappa_m
        if theta > 1.0 or theta <= 0.0:
            continue
        if math.log1p(-rng.random()) <= _log_ratio_scalar(posterior, theta) - envelope:
            if diagnostics is not None:
                diagnostics.draws += 1
                diagnostics.proposals += proposals
            return float(theta)

    _logger.warning(
        f"Rejection sampler hit {max_rejections} rejections for posterior {posterior}; "
        "falling back to grid inverse-CDF sampling."
    )
    if diagnostics is not None:
        diagnostics.draws += 1
        diagnostics.proposals += proposals
        diagnostics.fallbacks += 1
    return _grid_inverse_cdf(posterior, rng)


def sample_arms(
    counters: CounterSet,
    rng: np.random.Generator,
    envelopes: Optional[np.ndarray] = None,
    diagnostics: Optional[SamplerDiagnostics] = None,
    max_rejections: Optional[int] = None,
) -> np.ndarray:
    """
    One draw from the exact posterior of every arm, with the rejection rounds of all arms
    run together.

    Each arm follows `sample`: proposal on its most observed position, acceptance against
    its log envelope, and the grid fallback once `max_rejections` proposals were rejected.

    Args:
        counters: The counters.
        rng: The random stream.
        envelopes: The arms' log envelopes, as returned by `posterior_envelopes`.
        diagnostics: Optional counters updated in place.
        max_rejections: Rejection cap. Defaults to PBM_BANDITS_MAX_REJECTIONS.

    Returns:
        np.ndarray: One draw in (0, 1) per arm.
    """
    if max_rejections is None:
        max_rejections = PBM_BANDITS_MAX_REJECTIONS.get_int()
    if envelopes is None:
        envelopes = posterior_envelopes(counters)
    rows = np.arange(counters.num_arms)
    plays, clicks, kappa = counters.plays, counters.clicks, counters.kappa
    misses = plays - clicks
    proposal = np.argmax(plays, axis=1)
    alpha_m = clicks[rows, proposal]
    beta_m = misses[rows, proposal]
    kappa_m = kappa[proposal]
    other_clicks = clicks.sum(axis=1) - alpha_m
    offset = -xlogy(alpha_m, kappa_m)
    other_misses = misses.copy()
    other_misses[rows, proposal] = 0

    draws = np.empty(counters.num_arms)
    pending = rows
    proposals = 0
    attempts = 0
    while pending.size and attempts < max_rejections:
        attempts += 1
        proposals += pending.size
        theta = rng.beta(alpha_m[pending] + 1.0, beta_m[pending] + 1.0) / kappa_m[pending]
        u = rng.random(pending.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = (
                xlogy(other_clicks[pending], theta)
                + offset[pending]
                + xlogy(other_misses[pending], 1.0 - kappa * theta[:, None]).sum(axis=1)
            )
            accepted = (theta > 0.0) & (theta <= 1.0) & (np.log1p(-u) <= ratio - envelopes[pending])
        draws[pending[accepted]] = theta[accepted]
        pending = pending[~accepted]

    for arm in pending.tolist():
        posterior = ArmPosterior.from_counters(counters, arm)
        _logger.warning(
            f"Rejection sampler hit {max_rejections} rejections for posterior {posterior}; "
            "falling back to grid inverse-CDF sampling."
        )
        draws[arm] = _grid_inverse_cdf(posterior, rng)
    if diagnostics is not None:
        diagnostics.draws += counters.num_arms
        diagnostics.proposals += proposals
        diagnostics.fallbacks += pending.size
    return draws
