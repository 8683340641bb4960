"""
Upper confidence indices on theta_k.

- `ucb_index`: Hoeffding-type index on the pooled estimator.
- `pie_index`: multi-position KL index sup{q >= theta_min : Phi(q) <= delta} where
  Phi(q) = sum_l N[k, l] d(S[k, l] / N[k, l], kappa_l q) is convex in q.
- `klucb_scalar`, `klucb_indices`: the single-distribution KL-UCB index used by the
  ranked bandits.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.optimize import bisect

from pbmbandits.core.model import kl_bernoulli_array
from pbmbandits.core.stats import CounterSet
from pbmbandits.core.utils.config import (
    INDEX_XTOL,
    KLUCB_MAX_ITERS,
    KLUCB_XTOL,
    THETA_MIN_XTOL,
)
from pbmbandits.core.utils.numeric_utils import golden_section_minimize
from pbmbandits.core.utils.validation_utils import validate_arm, validate_probability

_logger = logging.getLogger(__name__)

_HUGE = 1e300
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class IndexResult:
    value: float
    at_boundary: bool = False


def _validate_delta(delta: float) -> float:
    delta = float(delta)
    if math.isnan(delta) or delta < 0:
        raise ValueError(f"Invalid delta: {delta}, expecting a nonnegative value.")
    return delta


def ucb_index(counters: CounterSet, arm: int, delta: float) -> float:
    """
    S_k / Ntilde_k + sqrt(N_k / Ntilde_k) * sqrt(delta / (2 Ntilde_k)), not clipped at 1.

    Raises:
        ValueError: If the arm has never been displayed.
    """
    validate_arm(arm, counters.num_arms)
    delta = _validate_delta(delta)
    plays = counters.arm_plays[arm]
    if plays < 1:
        raise ValueError(f"No data for arm {arm}: every arm must be displayed once first.")
    weighted = counters.arm_weighted_plays[arm]
    mean = counters.arm_clicks[arm] / weighted
    return float(mean + math.sqrt(plays / weighted) * math.sqrt(delta / (2.0 * weighted)))


def ucb_indices(counters: CounterSet, delta: float) -> np.ndarray:
    """`ucb_index` of every arm at once."""
    delta = _validate_delta(delta)
    plays = counters.arm_plays
    if (plays < 1).any():
        missing = np.flatnonzero(plays < 1).tolist()
        raise ValueError(f"No data for arms {missing}: every arm must be displayed once first.")
    weighted = counters.arm_weighted_plays
    return counters.arm_clicks / weighted + np.sqrt(plays / weighted) * np.sqrt(
        delta / (2.0 * weighted)
    )


def _phi_terms(plays: np.ndarray, clicks: np.ndarray, kappa: np.ndarray, q) -> np.ndarray:
    active = plays > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        means = np.where(active, clicks / np.where(active, plays, 1), 0.0)
        divergences = kl_bernoulli_array(means, np.minimum(kappa * q, 1.0))
        return np.where(active, plays * divergences, 0.0)


def _slope_terms(plays: np.ndarray, clicks: np.ndarray, kappa: np.ndarray, q) -> np.ndarray:
    active = plays > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        means = np.where(active, clicks / np.where(active, plays, 1), 0.0)
        scaled = kappa * q
        interior = plays * kappa * (scaled - means) / (scaled * (1.0 - scaled))
        no_clicks = plays * kappa / (1.0 - scaled)
        all_clicks = -plays / q
        terms = np.where(means <= 0.0, no_clicks, np.where(means >= 1.0, all_clicks, interior))
        return np.where(active, terms, 0.0)


def phi(counters: CounterSet, arm: int, q: float) -> float:
    """
    Phi(q) = sum over positions with N[k, l] > 0 of N[k, l] d(S[k, l] / N[k, l], kappa_l q).

    Returns:
        float: Phi(q), possibly +inf when kappa_l q = 1 for a position with a non-click.
    """
    validate_arm(arm, counters.num_arms)
    q = validate_probability(q, "q")
    return float(
        np.sum(_phi_terms(counters.plays[arm], counters.clicks[arm], counters.kappa, q))
    )


def phi_slope(counters: CounterSet, arm: int, q: float) -> float:
    """Derivative of Phi at q; -inf / +inf at boundaries where Phi blows up."""
    validate_arm(arm, counters.num_arms)
    terms = _slope_terms(counters.plays[arm], counters.clicks[arm], counters.kappa, q)
    return float(np.sum(terms))


def phi_profile(counters: CounterSet, q: Union[float, np.ndarray]) -> np.ndarray:
    """
    Phi of every arm, each evaluated at its own point.

    Args:
        counters: The counters.
        q: A scalar or one point per arm.

    Returns:
        np.ndarray: Phi_k(q_k) for every arm k.
    """
    q = np.broadcast_to(np.asarray(q, dtype=float), (counters.num_arms,))[:, None]
    return _phi_terms(counters.plays, counters.clicks, counters.kappa, q).sum(axis=1)


def phi_slopes(counters: CounterSet, q: Union[float, np.ndarray]) -> np.ndarray:
    """Derivative of Phi of every arm, each evaluated at its own point."""
    q = np.broadcast_to(np.asarray(q, dtype=float), (counters.num_arms,))[:, None]
    return _slope_terms(counters.plays, counters.clicks, counters.kappa, q).sum(axis=1)


def phi_min(counters: CounterSet, arm: int) -> Tuple[float, float]:
    """
    Minimize the convex function Phi over [0, 1].

    The minimizer is the root of the (nondecreasing) derivative, found by bisection on its
    sign; golden-section search takes over when the derivative has no usable sign change.

    Returns:
        Tuple[float, float]: theta_min and Phi(theta_min).

    Raises:
        ValueError: If the arm has never been displayed.
    """
    validate_arm(arm, counters.num_arms)
    plays = counters.plays[arm]
    if not (plays > 0).any():
        raise ValueError(f"No data for arm {arm}: it has never been displayed.")
    if counters.clicks[arm].sum() == 0:
        return 0.0, 0.0

    # scipy brackets need finite end values; clipping keeps the sign
    def slope(q: float) -> float:
        return float(np.clip(phi_slope(counters, arm, q), -_HUGE, _HUGE))

    def objective(q: float) -> float:
        return phi(counters, arm, q)

    slope_at_zero, slope_at_one = slope(0.0), slope(1.0)
    if math.isnan(slope_at_zero) or math.isnan(slope_at_one):
        _logger.debug(f"Derivative of Phi undefined at a boundary for arm {arm}.")
        theta_min = golden_section_minimize(objective, 0.0, 1.0, tol=THETA_MIN_XTOL).argmin
    elif slope_at_one <= 0:
        return 1.0, objective(1.0)
    else:
        try:
            theta_min = bisect(slope, 0.0, 1.0, xtol=THETA_MIN_XTOL)
        except (ValueError, RuntimeError) as e:
            _logger.debug(f"Bisection on the derivative of Phi failed for arm {arm} ({e}).")
            theta_min = golden_section_minimize(objective, 0.0, 1.0, tol=THETA_MIN_XTOL).argmin
    return float(theta_min), objective(theta_min)


def pie_index(counters: CounterSet, arm: int, delta: float) -> IndexResult:
    """
    The multi-position KL index sup{q in [theta_min, 1] : Phi(q) <= delta}.

    When delta is below min Phi the confidence set is empty and theta_min is returned.

    Args:
        counters: The counters.
        arm: The arm.
        delta: The exploration level, nonnegative.

    Returns:
        IndexResult: The index and whether it saturates at 1.
    """
    delta = _validate_delta(delta)
    theta_min, phi_at_min = phi_min(counters, arm)
    if theta_min >= 1.0:
        return IndexResult(1.0, at_boundary=True)
    if delta <= phi_at_min:
        return IndexResult(theta_min)
    if phi(counters, arm, 1.0) <= delta:
        return IndexResult(1.0, at_boundary=True)

    def excess(q: float) -> float:
        return min(phi(counters, arm, q), _HUGE) - delta

    root = bisect(excess, theta_min, 1.0, xtol=INDEX_XTOL, maxiter=200)
    return IndexResult(float(root))


def pie_index_at_least(counters: CounterSet, arm: int, delta: float, threshold: float) -> bool:
    """
    Whether pie_index(counters, arm, delta) >= threshold, with a single evaluation of Phi.

    Phi is nondecreasing right of theta_min, so for thresholds past the minimizer the
    index reaches the threshold iff Phi(threshold) <= delta.
    """
    if threshold <= 0.0:
        return True
    if threshold > 1.0:
        return False
    if phi_slope(counters, arm, threshold) <= 0.0:
        return True
    return phi(counters, arm, threshold) <= delta


def pie_indices_at_least(
    counters: CounterSet, delta: float, threshold: Union[float, np.ndarray]
) -> np.ndarray:
    """
    `pie_index_at_least` for every arm at once.

    Args:
        counters: The counters.
        delta: The exploration level, nonnegative.
        threshold: A scalar or one threshold per arm.

    Returns:
        np.ndarray: One flag per arm, true when the arm's index reaches its threshold.
    """
    delta = _validate_delta(delta)
    threshold = np.broadcast_to(np.asarray(threshold, dtype=float), (counters.num_arms,))
    inside = (threshold > 0.0) & (threshold <= 1.0)
    q = np.where(inside, threshold, 1.0)
    reaches = (phi_slopes(counters, q) <= 0.0) | (phi_profile(counters, q) <= delta)
    return np.where(inside, reaches, threshold <= 0.0)


def _klucb_start(p_hats: np.ndarray, counts: np.ndarray, delta: float) -> np.ndarray:
    # Pinsker and d(p, q) >= -log 2 - (1 - p) log(1 - q) both bound the root from above
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        pinsker = p_hats + np.sqrt(delta / (2.0 * counts))
        entropy = 1.0 - np.exp(-(delta / counts + math.log(2.0)) / (1.0 - p_hats))
    start = np.minimum(pinsker, np.where(p_hats < 1.0, entropy, 1.0))
    start = np.where(p_hats < 1.0, np.minimum(start, _BELOW_ONE), 1.0)
    return np.maximum(start, p_hats)


def klucb_indices(p_hats: np.ndarray, counts: np.ndarray, delta: float) -> np.ndarray:
    """
    Vectorised KL-UCB: max{q in [p, 1] : n d(p, q) <= delta} for every (p, n) pair.

    Newton's method on q -> n d(p, q) - delta, convex and increasing on [p, 1], started
    from an upper bound of the root, so that the iterates decrease towards it.
    """
    delta = _validate_delta(delta)
    p_hats = np.clip(np.asarray(p_hats, dtype=float), 0.0, 1.0)
    counts = np.broadcast_to(np.asarray(counts, dtype=float), p_hats.shape)
    if not (counts > 0).all():
        raise ValueError("Invalid counts: expecting at least one observation per entry.")
    q = _klucb_start(p_hats, counts, delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        for _ in range(KLUCB_MAX_ITERS):
            excess = counts * kl_bernoulli_array(p_hats, q) - delta
            slope = counts * (q - p_hats) / (q * (1.0 - q))
            active = (excess > 0.0) & (slope > 0.0) & np.isfinite(slope)
            if not active.any():
                break
            step = np.where(active, excess / slope, 0.0)
            # near 1 the iterates leave the pole by steps tiny in absolute terms
            converged = (step <= KLUCB_XTOL) & (step <= 0.5 * (1.0 - q))
            q = np.maximum(q - step, p_hats)
            if converged.all():
                break
    return q


def klucb_scalar(p_hat: float, n: int, delta: float) -> float:
    """
    The KL-UCB index max{q in [p_hat, 1] : n d(p_hat, q) <= delta}.
    """
    p_hat = validate_probability(p_hat, "p_hat")
    if n < 1:
        raise ValueError(f"Invalid count: {n}, expecting at least one observation.")
    return float(klucb_indices(np.array([p_hat]), np.array([n]), delta)[0])
