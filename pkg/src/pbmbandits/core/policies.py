"""
Learning policies for the PBM multiple-play bandit.

Every policy owns its counters and round number. `select_action` returns the list to
display; `update` folds the censored feedback of that display back in. The first K rounds
of every learning policy are a round-robin initialization that displays every arm at
every position once.
"""

import logging
import math
from abc import ABC, abstractmethod
from typing import ClassVar, Dict, List, Literal, Optional, Sequence, Tuple, Type, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import override

from pbmbandits.core.indices import klucb_indices, pie_indices_at_least, ucb_indices
from pbmbandits.core.model import Action, Feedback
from pbmbandits.core.posterior import SamplerDiagnostics, posterior_envelopes, sample_arms
from pbmbandits.core.stats import CounterSet
from pbmbandits.core.utils.config import DEFAULT_EPSILON
from pbmbandits.core.utils.validation_utils import validate_arms, validate_bits

_logger = logging.getLogger(__name__)

PolicyKind = Literal["pbm_ucb", "pbm_pie", "pbm_ts", "bc_mp_ts", "rba_klucb", "random"]
HorizonMode = Literal["anytime_log_t", "fixed_horizon_log_T"]


class PolicyConfig(BaseModel):
    kind: PolicyKind = Field(description="The learning policy to run")
    epsilon: float = Field(
        default=DEFAULT_EPSILON,
        gt=0,
        description="Exploration slack epsilon of the (1 + epsilon) log rates",
    )
    horizon_mode: HorizonMode = Field(
        default="anytime_log_t",
        description="Whether exploration rates use log t or log T",
    )
    horizon_T: Optional[int] = Field(
        default=None,
        ge=1,
        description="The known horizon T, required by the fixed_horizon_log_T mode",
    )

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def validate_horizon(self) -> "PolicyConfig":
        if self.horizon_mode == "fixed_horizon_log_T" and self.horizon_T is None:
            raise ValueError("horizon_T is required when horizon_mode is fixed_horizon_log_T.")
        if self.horizon_mode == "anytime_log_t" and self.horizon_T is not None:
            raise ValueError("horizon_T must not be set when horizon_mode is anytime_log_t.")
        return self


class LabeledPolicyConfig(PolicyConfig):
    label: Optional[str] = Field(
        default=None,
        min_length=1,
        description="Name of the policy in experiment outputs; defaults to the kind",
    )

    @property
    def name(self) -> str:
        return self.label or self.kind


def top_arms(scores: np.ndarray, count: int) -> Tuple[int, ...]:
    """The `count` arms with the largest scores, decreasing, ties to the smaller index."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    return tuple(int(arm) for arm in order[:count])


class BasePolicy(ABC):
    """
    Base class of the PBM policies.

    The policy object is the learner state: its counters, the number of updates received
    (`round`) and kind-specific scratch.
    """

    kind: ClassVar[str]
    requires_initialization: ClassVar[bool] = True

    def __init__(
        self,
        kappa: Sequence[float],
        num_arms: int,
        config: Optional[PolicyConfig] = None,
    ) -> None:
        if len(kappa) > num_arms:
            raise ValueError(
                f"The number of positions L={len(kappa)} exceeds the number of arms K={num_arms}."
            )
        self.config = config or PolicyConfig(kind=self.kind)
        if self.config.kind != self.kind:
            raise ValueError(f"Config of kind {self.config.kind} given to a {self.kind} policy.")
        self.counters = CounterSet(kappa, num_arms)
        self.round = 0

    @property
    def num_arms(self) -> int:
        return self.counters.num_arms

    @property
    def num_positions(self) -> int:
        return self.counters.num_positions

    def initialization_action(self) -> Optional[Action]:
        """
        The round-robin action (i, i + 1, ..., i + L - 1) mod K of round i < K, or None once
        every arm has been displayed at every position.
        """
        if not self.requires_initialization or self.round >= self.num_arms:
            return None
        return Action(
            tuple((self.round + l) % self.num_arms for l in range(self.num_positions))
        )

    def exploration_level(self) -> float:
        """delta = (1 + epsilon) log t at round t = round + 1, or (1 + epsilon) log T."""
        if self.config.horizon_mode == "fixed_horizon_log_T":
            horizon = self.config.horizon_T
        else:
            horizon = self.round + 1
        return (1.0 + self.config.epsilon) * math.log(horizon)

    def select_action(self, rng: np.random.Generator) -> Action:
        """
        Choose the list to display this round.

        Args:
            rng: The random stream of this replication.

        Returns:
            Action: L distinct arms, position 0 first.
        """
        if (action := self.initialization_action()) is not None:
            return action
        return self._select(rng)

    def update(
        self, action: Union[Action, Sequence[int]], feedback: Union[Feedback, Sequence[int]]
    ) -> None:
        """
        Record the feedback of a display.

        Raises:
            ValueError: If the action is invalid or the feedback length does not match it.
        """
        action = action if isinstance(action, Action) else Action(tuple(action))
        feedback = feedback if isinstance(feedback, Feedback) else Feedback(tuple(feedback))
        validate_arms(action.arms, self.num_arms, self.num_positions)
        validate_bits(feedback.z, self.num_positions)
        self.counters.update(action, feedback)
        self._after_update(action, feedback)
        self.round += 1

    def _after_update(self, action: Action, feedback: Feedback) -> None:  # noqa: ARG002
        return None

    @abstractmethod
    def _select(self, rng: np.random.Generator) -> Action:
        """Choose an action once initialization is complete."""

    def __repr__(self) -> str:
        return f"{type(self).__name__}(round={self.round}, counters={self.counters!r})"


class PbmUcbPolicy(BasePolicy):
    """Displays the L arms with the largest `ucb_index` in decreasing order."""

    kind = "pbm_ucb"

    @override
    def _select(self, rng: np.random.Generator) -> Action:
        indices = ucb_indices(self.counters, self.exploration_level())
        return Action(top_arms(indices, self.num_positions))


class PbmPiePolicy(BasePolicy):
    """
    Leaders by estimated attraction fill positions 0..L-2. The last position shows the
    L-th leader, or with probability 1/2 a challenger drawn uniformly among the non-leaders
    whose KL index reaches the L-th leader's estimate.
    """

    kind = "pbm_pie"

    def leaders(self) -> Tuple[int, ...]:
        # raw, unclipped estimates
        return top_arms(self.counters.theta_hats(), self.num_positions)

    def challenger_set(self, delta: float) -> List[int]:
        leaders = self.leaders()
        threshold = float(self.counters.theta_hats()[leaders[-1]])
        reaches = pie_indices_at_least(self.counters, delta, threshold)
        return [arm for arm in np.flatnonzero(reaches).tolist() if arm not in leaders]

    @override
    def _select(self, rng: np.random.Generator) -> Action:
        leaders = self.leaders()
        challengers = self.challenger_set(self.exploration_level())
        last = leaders[-1]
        if challengers and rng.random() < 0.5:
            last = challengers[int(rng.integers(len(challengers)))]
        return Action(leaders[:-1] + (last,))


class PbmTsPolicy(BasePolicy):
    """Thompson sampling from the exact per-arm posterior under a uniform prior."""

    kind = "pbm_ts"

    def __init__(
        self,
        kappa: Sequence[float],
        num_arms: int,
        config: Optional[PolicyConfig] = None,
    ) -> None:
        super().__init__(kappa, num_arms, config)
        self.diagnostics = SamplerDiagnostics()
        self._envelopes = np.zeros(self.num_arms)
        self._envelope_counts: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def envelopes(self) -> np.ndarray:
        """Log envelopes of every arm's posterior, recomputed for the arms whose counts moved."""
        plays, clicks = self.counters.plays, self.counters.clicks
        if self._envelope_counts is None:
            stale = np.arange(self.num_arms)
        else:
            seen_plays, seen_clicks = self._envelope_counts
            moved = (plays != seen_plays).any(axis=1) | (clicks != seen_clicks).any(axis=1)
            stale = np.flatnonzero(moved)
        if stale.size:
            self._envelopes[stale] = posterior_envelopes(self.counters, stale.tolist())
            self._envelope_counts = (plays.copy(), clicks.copy())
        return self._envelopes

    @override
    def _select(self, rng: np.random.Generator) -> Action:
        draws = sample_arms(self.counters, rng, self.envelopes(), self.diagnostics)
        return Action(top_arms(draws, self.num_positions))


class BcMpTsPolicy(BasePolicy):
    """
    Bias-corrected multiple-play Thompson sampling.

    This is an approximation: every arm's posterior is replaced by
    Beta(S_k + 1, max(Ntilde_k - S_k, 0) + 1), pooling all positions through the
    kappa-weighted play count.
    """

    kind = "bc_mp_ts"

    @override
    def _select(self, rng: np.random.Generator) -> Action:
        clicks = self.counters.arm_clicks
        misses = np.maximum(self.counters.arm_weighted_plays - clicks, 0.0)
        draws = rng.beta(clicks + 1.0, misses + 1.0)
        return Action(top_arms(draws, self.num_positions))


class RbaKlUcbPolicy(BasePolicy):
    """
    Ranked bandits: one KL-UCB learner per position, each choosing among all K arms.

    A pick already shown at a higher position is replaced on screen by a uniformly random
    unused arm; the learner that made the duplicate pick is credited a reward of zero for
    its own pick and the replacement is not credited.
    """

    kind = "rba_klucb"

    def __init__(
        self,
        kappa: Sequence[float],
        num_arms: int,
        config: Optional[PolicyConfig] = None,
    ) -> None:
        super().__init__(kappa, num_arms, config)
        shape = (self.num_positions, self.num_arms)
        self.sub_plays = np.zeros(shape, dtype=np.int64)
        self.sub_rewards = np.zeros(shape, dtype=np.int64)
        self._pending: Optional[Tuple[Action, Tuple[int, ...]]] = None

    @override
    def exploration_level(self) -> float:
        """KL-UCB rate log t + 3 log log t for t >= 3, zero before."""
        t = self.round + 1
        if t < 3:
            return 0.0
        return math.log(t) + 3.0 * math.log(math.log(t))

    def sub_indices(self) -> np.ndarray:
        """KL-UCB index of every arm in every position's learner, shape (L, K)."""
        plays = np.maximum(self.sub_plays, 1)
        return klucb_indices(self.sub_rewards / plays, plays, self.exploration_level())

    @override
    def _select(self, rng: np.random.Generator) -> Action:
        picks = tuple(int(np.argmax(row)) for row in self.sub_indices())
        displayed: List[int] = []
        for pick in picks:
            if pick in displayed:
                unused = [arm for arm in range(self.num_arms) if arm not in displayed]
                displayed.append(unused[int(rng.integers(len(unused)))])
            else:
                displayed.append(pick)
        action = Action(tuple(displayed))
        self._pending = (action, picks)
        return action

    @override
    def _after_update(self, action: Action, feedback: Feedback) -> None:
        if self._pending is not None and self._pending[0] == action:
            picks = self._pending[1]
        else:
            picks = action.arms
        self._pending = None
        for position, (pick, shown, click) in enumerate(zip(picks, action.arms, feedback.z)):
            self.sub_plays[position, pick] += 1
            if pick == shown:
                self.sub_rewards[position, pick] += click


class RandomPolicy(BasePolicy):
    """Uniformly random ordered list of L distinct arms."""

    kind = "random"
    requires_initialization = False

    @override
    def _select(self, rng: np.random.Generator) -> Action:
        arms = rng.choice(self.num_arms, size=self.num_positions, replace=False)
        return Action(tuple(int(arm) for arm in arms))


POLICY_CLASSES: Dict[str, Type[BasePolicy]] = {
    cls.kind: cls
    for cls in (
        PbmUcbPolicy,
        PbmPiePolicy,
        PbmTsPolicy,
        BcMpTsPolicy,
        RbaKlUcbPolicy,
        RandomPolicy,
    )
}


def build_policy(config: PolicyConfig, kappa: Sequence[float], num_arms: int) -> BasePolicy:
    """
    Instantiate the policy described by a config.

    Args:
        config: The policy configuration.
        kappa: The examination probabilities, known to the learner.
        num_arms: The number of arms K.

    Returns:
        BasePolicy: A fresh policy at round 0.
    """
    policy_cls = POLICY_CLASSES[config.kind]
    _logger.debug(f"Building {policy_cls.__name__} with {config}.")
    return policy_cls(kappa, num_arms, config)
