"""
Sufficient statistics per (arm, position) and the pooled linear estimator of theta.
"""

import math
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from pbmbandits.core.model import Action, Feedback
from pbmbandits.core.utils.validation_utils import (
    validate_arm,
    validate_arms,
    validate_bits,
    validate_probability,
)


class CounterSet:
    """
    Play counts N[k, l] and click counts S[k, l] of every arm at every position.

    Counts are exact integers. The kappa-weighted sums are recomputed from the integer
    counts with compensated summation whenever they are requested after an update.
    """

    def __init__(
        self,
        kappa: Sequence[float],
        num_arms: int,
        plays: Optional[np.ndarray] = None,
        clicks: Optional[np.ndarray] = None,
    ) -> None:
        self.kappa = np.asarray(kappa, dtype=float)
        self.num_arms = int(num_arms)
        self.num_positions = len(self.kappa)
        shape = (self.num_arms, self.num_positions)
        self.plays = np.zeros(shape, dtype=np.int64) if plays is None else np.array(plays)
        self.clicks = np.zeros(shape, dtype=np.int64) if clicks is None else np.array(clicks)
        if self.plays.shape != shape or self.clicks.shape != shape:
            raise ValueError(
                f"Counts must have shape {shape}, got plays {self.plays.shape} and "
                f"clicks {self.clicks.shape}."
            )
        self.plays = self.plays.astype(np.int64)
        self.clicks = self.clicks.astype(np.int64)
        if (self.plays < 0).any() or (self.clicks < 0).any():
            raise ValueError("Counts must be nonnegative.")
        if (self.clicks > self.plays).any():
            raise ValueError("Click counts cannot exceed play counts.")
        self._weighted: Optional[np.ndarray] = None

    def copy(self) -> "CounterSet":
        return CounterSet(self.kappa, self.num_arms, self.plays.copy(), self.clicks.copy())

    def update(
        self, action: Union[Action, Sequence[int]], feedback: Union[Feedback, Sequence[int]]
    ) -> "CounterSet":
        """
        Record one display: plays[a_l, l] += 1 and clicks[a_l, l] += z_l for every position.

        Returns:
            CounterSet: self, updated in place.
        """
        arms = tuple(action)
        bits = tuple(feedback)
        validate_arms(arms, self.num_arms, self.num_positions)
        validate_bits(bits, self.num_positions)
        positions = np.arange(self.num_positions)
        self.plays[arms, positions] += 1
        self.clicks[arms, positions] += bits
        self._weighted = None
        return self

    @property
    def arm_clicks(self) -> np.ndarray:
        """S_k, total clicks of each arm."""
        return self.clicks.sum(axis=1)

    @property
    def arm_plays(self) -> np.ndarray:
        """N_k, total plays of each arm."""
        return self.plays.sum(axis=1)

    @property
    def weighted_plays(self) -> np.ndarray:
        """Bias-corrected counts kappa_l * N[k, l]."""
        return self.plays * self.kappa

    @property
    def arm_weighted_plays(self) -> np.ndarray:
        """Bias-corrected totals sum_l kappa_l * N[k, l], one per arm."""
        if self._weighted is None:
            weighted = self.weighted_plays
            self._weighted = np.array([math.fsum(row) for row in weighted])
        return self._weighted

    def theta_hats(self) -> np.ndarray:
        """Pooled estimates S_k / Ntilde_k of every arm; nan for arms without data."""
        weighted = self.arm_weighted_plays
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(weighted > 0, self.arm_clicks / weighted, np.nan)

    def to_frame(self) -> pd.DataFrame:
        """Counters as a long table `arm,position,plays,clicks`, 1-based indices."""
        arms, positions = np.meshgrid(
            np.arange(self.num_arms), np.arange(self.num_positions), indexing="ij"
        )
        return pd.DataFrame(
            {
                "arm": arms.ravel() + 1,
                "position": positions.ravel() + 1,
                "plays": self.plays.ravel(),
                "clicks": self.clicks.ravel(),
            }
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CounterSet):
            return NotImplemented
        return (
            np.array_equal(self.kappa, other.kappa)
            and np.array_equal(self.plays, other.plays)
            and np.array_equal(self.clicks, other.clicks)
        )

    def __repr__(self) -> str:
        return (
            f"CounterSet(num_arms={self.num_arms}, num_positions={self.num_positions}, "
            f"total_plays={int(self.plays.sum())})"
        )


def theta_hat(counters: CounterSet, arm: int) -> float:
    """
    The pooled linear estimator S_k / Ntilde_k. Not clipped; it may exceed one.

    Raises:
        ValueError: If the arm has never been displayed.
    """
    validate_arm(arm, counters.num_arms)
    weighted = counters.arm_weighted_plays[arm]
    if weighted <= 0:
        raise ValueError(f"No data for arm {arm}: it has never been displayed.")
    return float(counters.arm_clicks[arm] / weighted)


def fisher_information(counters: CounterSet, arm: int, theta: float) -> float:
    """
    Fisher information for theta_k given the allocation of arm k:
    sum_l N[k, l] * kappa_l / (theta (1 - kappa_l theta)).
    """
    validate_arm(arm, counters.num_arms)
    theta = validate_probability(theta, "theta", open_lower=True, open_upper=True)
    plays = counters.plays[arm]
    terms = plays * counters.kappa / (theta * (1.0 - counters.kappa * theta))
    return math.fsum(terms)


def estimator_variance(counters: CounterSet, arm: int, theta: float) -> float:
    """
    Conditional variance of the pooled estimator:
    sum_l N[k, l] kappa_l theta (1 - kappa_l theta) / (sum_l N[k, l] kappa_l)^2.
    """
    validate_arm(arm, counters.num_arms)
    theta = validate_probability(theta, "theta", open_lower=True, open_upper=True)
    weighted = counters.arm_weighted_plays[arm]
    if weighted <= 0:
        raise ValueError(f"No data for arm {arm}: it has never been displayed.")
    kappa = counters.kappa
    numerator = math.fsum(counters.plays[arm] * kappa * theta * (1.0 - kappa * theta))
    return numerator / weighted**2
