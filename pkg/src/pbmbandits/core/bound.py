"""
Asymptotic regret constants of the PBM: the closed-form lower bound f(theta) on the
coefficient of log T, its relaxations, and the leading terms of the PBM-UCB and PBM-PIE
upper bounds.

All functions sort arms and positions canonically (decreasing theta and kappa, ties to the
smaller index) before applying formulas that assume sorted parameters, so they are
invariant under permuting the input arms.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from pbmbandits.core.model import (
    Action,
    PbmModel,
    gap,
    kl_bernoulli,
    optimal_action,
)
from pbmbandits.core.utils.validation_utils import validate_arm, validate_position

_logger = logging.getLogger(__name__)


def _sorted_parameters(model: PbmModel):
    theta = model.theta_array[list(model.sorted_arms())]
    kappa = model.kappa_array[list(model.sorted_positions())]
    return theta, kappa


def insertion_action(model: PbmModel, arm: int, position: int) -> Action:
    """
    The action v_{k,l}: suboptimal arm k at position l, the best L-1 arms in the remaining
    positions by decreasing examination probability.

    Args:
        model: The problem instance.
        arm: A suboptimal arm, i.e. not among the L most attractive arms.
        position: The position receiving the arm.

    Returns:
        Action: The insertion action, in display order.

    Raises:
        ValueError: If the arm is one of the L most attractive arms.
    """
    validate_arm(arm, model.num_arms)
    validate_position(position, model.num_positions)
    arm_order = model.sorted_arms()
    if arm in arm_order[: model.num_positions]:
        raise ValueError(
            f"Invalid arm {arm}: it is among the {model.num_positions} most attractive arms, "
            f"expecting one of {sorted(arm_order[model.num_positions :])}."
        )
    arms = [arm] * model.num_positions
    others = [p for p in model.sorted_positions() if p != position]
    for rank, p in enumerate(others):
        arms[p] = arm_order[rank]
    return Action(tuple(arms))


@dataclass(frozen=True)
class ArmBoundTerm:
    """Contribution of one suboptimal arm to f(theta)."""

    arm: int
    best_position: int
    gap: float
    kl: float
    ratio: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.ratio)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "arm": self.arm,
            "best_position": self.best_position,
            "gap": self.gap,
            "kl": self.kl,
            "ratio": self.ratio if self.finite else None,
            "finite": self.finite,
        }


@dataclass
class BoundReport:
    """
    Lower-bound report of a model.

    `f_theta` sums the finite per-arm ratios; arms tied with the L-th best arm have an
    infinite ratio and are listed in `infinite_arms` instead.
    """

    model: PbmModel
    f_theta: float
    per_arm: List[ArmBoundTerm]
    crude: float
    relaxed: float
    multiple_play: float
    ucb_constant_C: float
    permutation_gap: float
    infinite_arms: List[int] = field(default_factory=list)

    def pie_leading(self, epsilon: float, eta: float) -> float:
        return pie_leading_term(self.model, epsilon, eta)

    def ucb_leading(self, epsilon: float) -> float:
        return ucb_leading_term(self.model, epsilon)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_mapping(),
            "f_theta": self.f_theta,
            "per_arm": [term.to_dict() for term in self.per_arm],
            "infinite_arms": self.infinite_arms,
            "crude": self.crude,
            "relaxed": self.relaxed,
            "multiple_play": self.multiple_play,
            "ucb_constant_C": self.ucb_constant_C,
            "permutation_gap": (
                self.permutation_gap if math.isfinite(self.permutation_gap) else None
            ),
        }


def _insertion_gap(model: PbmModel, action: Action) -> float:
    # summed over the positions where the action departs from the optimal one
    return math.fsum(
        kappa_l * (model.theta[best] - model.theta[shown])
        for kappa_l, best, shown in zip(model.kappa, optimal_action(model).arms, action.arms)
        if best != shown
    )


def _best_insertion(model: PbmModel, arm: int, theta_last: float) -> ArmBoundTerm:
    best: Optional[ArmBoundTerm] = None
    theta_k = model.theta[arm]
    for position in range(model.num_positions):
        kappa_l = model.kappa[position]
        delta = _insertion_gap(model, insertion_action(model, arm, position))
        kl = kl_bernoulli(kappa_l * theta_k, kappa_l * theta_last)
        ratio = delta / kl if kl > 0 else math.inf
        if best is None or ratio < best.ratio:
            best = ArmBoundTerm(arm, position, delta, kl, ratio)
    return best


def regret_lower_bound(model: PbmModel) -> BoundReport:
    """
    Closed-form lower bound on the log T coefficient of the regret of any uniformly
    efficient policy:

        f(theta) = sum_{k > L} min_l Delta(v_{k,l}) / d(kappa_l theta_k, kappa_l theta_L)

    The minimum is taken by enumerating the L positions.

    Args:
        model: The problem instance.

    Returns:
        BoundReport: f(theta), the per-arm winners and the reference constants.
    """
    arm_order = model.sorted_arms()
    L = model.num_positions
    per_arm: List[ArmBoundTerm] = []
    infinite_arms: List[int] = []
    if model.num_arms > L:
        theta_last = model.theta[arm_order[L - 1]]
        for arm in arm_order[L:]:
            term = _best_insertion(model, arm, theta_last)
            per_arm.append(term)
            if not term.finite:
                infinite_arms.append(arm)
    if infinite_arms:
        _logger.warning(
            f"Arms {infinite_arms} are tied with the L-th best arm; their lower-bound terms are "
            "infinite and excluded from f(theta)."
        )
    f_theta = math.fsum(term.ratio for term in per_arm if term.finite)
    return BoundReport(
        model=model,
        f_theta=f_theta,
        per_arm=per_arm,
        crude=crude_bound(model),
        relaxed=relaxed_bound(model),
        multiple_play=multiple_play_bound(model),
        ucb_constant_C=ucb_constant(model),
        permutation_gap=permutation_gap(model),
        infinite_arms=infinite_arms,
    )


def crude_bound(model: PbmModel) -> float:
    """
    kappa_L sum_{k > L} (theta_L - theta_k) / d(kappa_L theta_k, kappa_L theta_L).

    This is the last-position term of every minimum in f(theta), hence never below it.
    Tied arms contribute nothing.
    """
    theta, kappa = _sorted_parameters(model)
    L = model.num_positions
    kappa_last, theta_last = kappa[-1], theta[L - 1]
    terms = []
    for theta_k in theta[L:]:
        kl = kl_bernoulli(kappa_last * theta_k, kappa_last * theta_last)
        if kl > 0:
            terms.append(kappa_last * (theta_last - theta_k) / kl)
    return math.fsum(terms)


def relaxed_bound(model: PbmModel) -> float:
    """
    sum_{k > L} min_l kappa_l (theta_L - theta_k) / d(kappa_l theta_k, kappa_l theta_L).

    Each insertion gap is at least kappa_l (theta_L - theta_k), so this never exceeds
    f(theta).
    """
    theta, kappa = _sorted_parameters(model)
    L = model.num_positions
    theta_last = theta[L - 1]
    terms = []
    for theta_k in theta[L:]:
        if theta_k >= theta_last:
            continue
        terms.append(
            min(
                kappa_l * (theta_last - theta_k)
                / kl_bernoulli(kappa_l * theta_k, kappa_l * theta_last)
                for kappa_l in kappa
            )
        )
    return math.fsum(terms)


def multiple_play_bound(model: PbmModel) -> float:
    """
    The uncensored multiple-play constant sum_{k > L} (theta_L - theta_k) / d(theta_k, theta_L),
    i.e. the lower bound when every position is always examined.
    """
    theta, _ = _sorted_parameters(model)
    L = model.num_positions
    theta_last = theta[L - 1]
    return math.fsum(
        (theta_last - theta_k) / kl_bernoulli(theta_k, theta_last)
        for theta_k in theta[L:]
        if theta_k < theta_last
    )


def ucb_constant(model: PbmModel) -> float:
    """
    C(kappa) = min_l [(sum_{j <= L} kappa_j)^2 / l + (sum_{j <= l} kappa_j)^2] / kappa_L^2.
    """
    _, kappa = _sorted_parameters(model)
    cumulative = np.cumsum(kappa)
    total = cumulative[-1]
    ranks = np.arange(1, len(kappa) + 1)
    candidates = (total**2 / ranks + cumulative**2) / kappa[-1] ** 2
    return float(np.min(candidates))


def permutation_gap(model: PbmModel) -> float:
    """
    Smallest gap among the reorderings of the optimal list, excluding the optimal list itself.
    +inf when L = 1.
    """
    best = optimal_action(model)
    gaps = [
        gap(model, permuted)
        for permuted in itertools.permutations(best.arms)
        if permuted != best.arms
    ]
    return min(gaps, default=math.inf)


def ucb_leading_term(model: PbmModel, epsilon: float) -> float:
    """
    Coefficient of log T in the PBM-UCB regret upper bound:
    16 (1 + epsilon) C(kappa) (L / Delta + sum_{k > L} 1 / (kappa_L (theta_L - theta_k))).

    Returns +inf when some suboptimal arm is tied with the L-th best arm or the optimal list
    has a zero-gap reordering.
    """
    if epsilon <= 0:
        raise ValueError(f"Invalid epsilon: {epsilon}, expecting a positive value.")
    theta, kappa = _sorted_parameters(model)
    L = model.num_positions
    theta_last = theta[L - 1]
    delta = permutation_gap(model)
    if math.isinf(delta):
        total = 0.0
    elif delta > 0:
        total = L / delta
    else:
        total = math.inf
    for theta_k in theta[L:]:
        total += 1.0 / (kappa[-1] * (theta_last - theta_k)) if theta_k < theta_last else math.inf
    return 16.0 * (1.0 + epsilon) * ucb_constant(model) * total


def admissible_eta(model: PbmModel) -> float:
    """Half the smallest gap between consecutive sorted attraction probabilities."""
    theta, _ = _sorted_parameters(model)
    if len(theta) < 2:
        return math.inf
    return float(np.min(theta[:-1] - theta[1:])) / 2.0


def pie_leading_term(model: PbmModel, epsilon: float, eta: float) -> float:
    """
    Coefficient of log T in the PBM-PIE regret upper bound:
    (1 + epsilon)^2 sum_{k > L} kappa_L (theta_L - theta_k)
    / d(kappa_L theta_k, kappa_L (theta_L - eta)).

    Args:
        model: The problem instance.
        epsilon: Exploration slack, positive.
        eta: Confidence margin, in (0, min_k (theta_k - theta_{k+1}) / 2).

    Returns:
        float: The leading term; tends to `crude_bound` as epsilon and eta go to zero.
    """
    if epsilon <= 0:
        raise ValueError(f"Invalid epsilon: {epsilon}, expecting a positive value.")
    upper = admissible_eta(model)
    if not 0 < eta < upper:
        raise ValueError(f"Invalid eta: {eta}, expecting a value in (0, {upper}).")
    theta, kappa = _sorted_parameters(model)
    L = model.num_positions
    kappa_last, theta_last = kappa[-1], theta[L - 1]
    total = math.fsum(
        kappa_last
        * (theta_last - theta_k)
        / kl_bernoulli(kappa_last * theta_k, kappa_last * (theta_last - eta))
        for theta_k in theta[L:]
    )
    return (1.0 + epsilon) ** 2 * total
