"""
Problem instances of the position-based click model (PBM).

A click at position l on arm k requires the position to be examined (probability kappa_l)
and the arm to be attractive (probability theta_k); the learner only sees the product.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, Mapping, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator
from scipy.special import rel_entr

from pbmbandits.core.utils.validation_utils import validate_arms, validate_bits

_logger = logging.getLogger(__name__)


def kl_bernoulli(p: float, q: float) -> float:
    """
    Kullback-Leibler divergence from Bernoulli(p) to Bernoulli(q).

    Uses 0 * log 0 = 0 and returns +inf when q is 0 or 1 and p differs from q.

    Args:
        p: Mean of the first distribution, in [0, 1].
        q: Mean of the second distribution, in [0, 1].

    Returns:
        float: The divergence, in [0, +inf].
    """
    return max(float(rel_entr(p, q) + rel_entr(1.0 - p, 1.0 - q)), 0.0)


def kl_bernoulli_array(p: Any, q: Any) -> np.ndarray:
    """Elementwise `kl_bernoulli` over broadcast arrays."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return np.maximum(rel_entr(p, q) + rel_entr(1.0 - p, 1.0 - q), 0.0)


@dataclass(frozen=True)
class Action:
    """
    An ordered list of distinct arms, position 0 first.
    """

    arms: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(int(arm) for arm in self.arms))

    def __len__(self) -> int:
        return len(self.arms)

    def __iter__(self) -> Iterator[int]:
        return iter(self.arms)

    def __getitem__(self, position: int) -> int:
        return self.arms[position]


@dataclass(frozen=True)
class Feedback:
    """
    Censored observation vector: z[l] = 1 iff position l was examined and its arm attracted.
    """

    z: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "z", tuple(int(bit) for bit in self.z))
        validate_bits(self.z, len(self.z))

    def __len__(self) -> int:
        return len(self.z)

    def __iter__(self) -> Iterator[int]:
        return iter(self.z)

    def __getitem__(self, position: int) -> int:
        return self.z[position]


class PbmModel(BaseModel):
    """
    A PBM instance: attraction probabilities theta (one per arm) and examination
    probabilities kappa (one per position). Inputs need not be sorted.
    """

    theta: Tuple[float, ...] = Field(description="Attraction probability of each arm, in (0, 1)")
    kappa: Tuple[float, ...] = Field(
        description="Examination probability of each position, in (0, 1]"
    )

    model_config = ConfigDict(frozen=True)

    _theta: np.ndarray = PrivateAttr()
    _kappa: np.ndarray = PrivateAttr()
    _optimal: Action = PrivateAttr()
    _best_reward: float = PrivateAttr()

    @model_validator(mode="after")
    def validate_model(self) -> "PbmModel":
        if not self.kappa:
            raise ValueError("kappa must contain at least one position.")
        if len(self.kappa) > len(self.theta):
            raise ValueError(
                f"The number of positions L={len(self.kappa)} exceeds the number of arms "
                f"K={len(self.theta)}."
            )
        for k, value in enumerate(self.theta):
            if not 0.0 < value < 1.0:
                raise ValueError(f"Invalid theta[{k}]: {value}, expecting a value in (0, 1).")
        for l, value in enumerate(self.kappa):
            if not 0.0 < value <= 1.0:
                raise ValueError(f"Invalid kappa[{l}]: {value}, expecting a value in (0, 1].")

        self._theta = np.asarray(self.theta, dtype=float)
        self._kappa = np.asarray(self.kappa, dtype=float)
        self._theta.setflags(write=False)
        self._kappa.setflags(write=False)
        arm_order = self.sorted_arms()
        position_order = self.sorted_positions()
        arms = [0] * self.num_positions
        for rank, position in enumerate(position_order):
            arms[position] = arm_order[rank]
        self._optimal = Action(tuple(arms))
        self._best_reward = math.fsum(self._kappa * self._theta[list(arms)])
        return self

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "PbmModel":
        """
        Build a model from a parsed model file with fields `K`, `L`, `theta`, `kappa`.

        `K` and `L` are optional; when present they must match the vector lengths.
        """
        model = cls(theta=tuple(data["theta"]), kappa=tuple(data["kappa"]))
        if "K" in data and int(data["K"]) != model.num_arms:
            raise ValueError(f"K={data['K']} does not match the {model.num_arms} theta values.")
        if "L" in data and int(data["L"]) != model.num_positions:
            raise ValueError(
                f"L={data['L']} does not match the {model.num_positions} kappa values."
            )
        return model

    def to_mapping(self) -> Dict[str, Any]:
        return {
            "K": self.num_arms,
            "L": self.num_positions,
            "theta": list(self.theta),
            "kappa": list(self.kappa),
        }

    @property
    def num_arms(self) -> int:
        return len(self.theta)

    @property
    def num_positions(self) -> int:
        return len(self.kappa)

    @property
    def theta_array(self) -> np.ndarray:
        return self._theta

    @property
    def kappa_array(self) -> np.ndarray:
        return self._kappa

    @property
    def best_reward(self) -> float:
        return self._best_reward

    def sorted_arms(self) -> Tuple[int, ...]:
        """Arms by decreasing theta, ties broken by the smaller index."""
        return tuple(sorted(range(self.num_arms), key=lambda k: (-self.theta[k], k)))

    def sorted_positions(self) -> Tuple[int, ...]:
        """Positions by decreasing kappa, ties broken by the smaller index."""
        return tuple(sorted(range(self.num_positions), key=lambda l: (-self.kappa[l], l)))

    def __eq__(self, other: object) -> bool:
        # the cached arrays are derived from the fields and must not be compared
        if not isinstance(other, PbmModel):
            return NotImplemented
        return self.theta == other.theta and self.kappa == other.kappa

    def __hash__(self) -> int:
        return hash((self.theta, self.kappa))

    def validate_action(self, action: Union[Action, Tuple[int, ...]]) -> Action:
        if not isinstance(action, Action):
            action = Action(tuple(action))
        validate_arms(action.arms, self.num_arms, self.num_positions)
        return action


def expected_reward(model: PbmModel, action: Union[Action, Tuple[int, ...]]) -> float:
    """
    Expected number of clicks of an action: sum over positions of kappa_l * theta_{a_l}.
    """
    action = model.validate_action(action)
    return math.fsum(model.kappa_array * model.theta_array[list(action.arms)])


def optimal_action(model: PbmModel) -> Action:
    """
    The reward-maximizing action: arms by decreasing theta assigned to positions by
    decreasing kappa, ties broken by the smaller arm index.
    """
    return model._optimal


def gap(model: PbmModel, action: Union[Action, Tuple[int, ...]]) -> float:
    """Expected gap to optimality, mu* - mu_a, clipped at zero against rounding."""
    return max(model.best_reward - expected_reward(model, action), 0.0)


def sample_feedback(
    model: PbmModel, action: Union[Action, Tuple[int, ...]], rng: np.random.Generator
) -> Feedback:
    """
    Draw the censored feedback of one display.

    Each z_l is an independent Bernoulli(kappa_l * theta_{a_l}) draw; the examination and
    attraction variables are never materialized separately.
    """
    action = model.validate_action(action)
    probabilities = model.kappa_array * model.theta_array[list(action.arms)]
    clicks = rng.random(model.num_positions) < probabilities
    return Feedback(tuple(int(click) for click in clicks))


PRESETS: Dict[str, PbmModel] = {
    "synthetic": PbmModel(theta=(0.45, 0.35, 0.25, 0.15, 0.05), kappa=(0.9, 0.6, 0.3)),
    "high_attraction": PbmModel(theta=(0.95, 0.85, 0.75, 0.65, 0.55), kappa=(0.9, 0.6, 0.3)),
}


def get_preset(name: str) -> PbmModel:
    if model := PRESETS.get(name):
        return model
    raise ValueError(f"Unknown model preset: {name}. Available presets: {sorted(PRESETS)}.")
