import math

import numpy as np
import pytest
from pydantic import ValidationError

from pbmbandits.core.model import Action, Feedback, gap, sample_feedback
from pbmbandits.core.policies import (
    POLICY_CLASSES,
    BcMpTsPolicy,
    LabeledPolicyConfig,
    PbmPiePolicy,
    PbmTsPolicy,
    PbmUcbPolicy,
    PolicyConfig,
    RandomPolicy,
    RbaKlUcbPolicy,
    build_policy,
    top_arms,
)
from pbmbandits.core.posterior import posterior_envelopes
from pbmbandits.test_utils.model_utils import (
    SYNTHETIC_KAPPA,
    requires_long_run,
    synthetic_model,  # noqa: F401
)

ALL_KINDS = sorted(POLICY_CLASSES)


def _run(policy, model, rounds, rng):
    actions = []
    for _ in range(rounds):
        action = policy.select_action(rng)
        policy.update(action, sample_feedback(model, action, rng))
        actions.append(action.arms)
    return actions


def test_policy_config_validation():
    config = PolicyConfig(kind="pbm_pie")
    assert config.epsilon == 0.01
    assert config.horizon_mode == "anytime_log_t"
    with pytest.raises(ValidationError, match=r"horizon_T is required"):
        PolicyConfig(kind="pbm_pie", horizon_mode="fixed_horizon_log_T")
    with pytest.raises(ValidationError, match=r"horizon_T must not be set"):
        PolicyConfig(kind="pbm_pie", horizon_T=1000)
    with pytest.raises(ValidationError, match=r"greater than 0"):
        PolicyConfig(kind="pbm_ucb", epsilon=0.0)
    with pytest.raises(ValidationError):
        PolicyConfig(kind="cascade_ucb")


def test_labeled_policy_config_name():
    assert LabeledPolicyConfig(kind="pbm_ts").name == "pbm_ts"
    assert LabeledPolicyConfig(kind="pbm_ts", label="ts-fast").name == "ts-fast"


def test_top_arms_breaks_ties_by_smaller_index():
    assert top_arms(np.array([0.2, 0.5, 0.5, 0.1]), 3) == (1, 2, 0)


def test_policy_rejects_more_positions_than_arms():
    with pytest.raises(ValueError, match=r"exceeds the number of arms"):
        PbmUcbPolicy((0.9, 0.6, 0.3), 2)
    with pytest.raises(ValueError, match=r"Config of kind pbm_ts"):
        PbmUcbPolicy((0.9,), 2, PolicyConfig(kind="pbm_ts"))


def test_round_robin_initialization():
    policy = PbmPiePolicy(SYNTHETIC_KAPPA, 5)
    rng = np.random.default_rng(0)
    actions = []
    for _ in range(5):
        action = policy.select_action(rng)
        actions.append(action.arms)
        policy.update(action, Feedback((0, 0, 0)))
    assert actions == [(0, 1, 2), (1, 2, 3), (2, 3, 4), (3, 4, 0), (4, 0, 1)]
    assert (policy.counters.plays == 1).all()
    assert policy.initialization_action() is None


def test_exploration_level():
    policy = PbmPiePolicy(SYNTHETIC_KAPPA, 5, PolicyConfig(kind="pbm_pie", epsilon=0.5))
    policy.round = 99
    assert policy.exploration_level() == pytest.approx(1.5 * math.log(100))
    fixed = PolicyConfig(kind="pbm_pie", horizon_mode="fixed_horizon_log_T", horizon_T=10_000)
    policy = PbmPiePolicy(SYNTHETIC_KAPPA, 5, fixed)
    assert policy.exploration_level() == pytest.approx(1.01 * math.log(10_000))


def test_pbm_ucb_prefers_larger_mean():
    policy = PbmUcbPolicy((1.0,), 2)
    policy.update((0,), (1,))
    policy.update((1,), (0,))
    assert policy.round == 2
    assert policy.select_action(np.random.default_rng(0)) == Action((0,))


def _pie_policy_with_counts(theta_hats, plays_per_position, rounds):
    policy = PbmPiePolicy(SYNTHETIC_KAPPA, len(theta_hats))
    kappa = np.array(SYNTHETIC_KAPPA)
    plays = np.full((len(theta_hats), 3), plays_per_position, dtype=np.int64)
    policy.counters.plays = plays
    policy.counters.clicks = np.round(np.outer(theta_hats, kappa) * plays).astype(np.int64)
    policy.counters._weighted = None
    policy.round = rounds
    return policy


def test_pie_without_challengers_plays_leaders():
    policy = _pie_policy_with_counts((0.5, 0.4, 0.3, 0.05, 0.05), 10_000, 50_000)
    assert policy.leaders() == (0, 1, 2)
    assert policy.challenger_set(policy.exploration_level()) == []
    rng = np.random.default_rng(1)
    for _ in range(50):
        assert policy.select_action(rng) == Action((0, 1, 2))


def test_pie_challenger_set_grows_with_delta():
    policy = _pie_policy_with_counts((0.5, 0.4, 0.3, 0.25, 0.2, 0.1), 40, 200)
    previous = set()
    for delta in np.linspace(0.0, 60.0, 61):
        current = set(policy.challenger_set(delta))
        assert previous <= current
        previous = current
    assert previous == {3, 4, 5}


def test_pie_leaders_use_raw_estimates():
    policy = PbmPiePolicy((0.5, 0.5), 3)
    policy.counters.plays = np.array([[10, 0], [10, 0], [10, 0]])
    # arm 1 has more clicks than its kappa-weighted plays
    policy.counters.clicks = np.array([[4, 0], [6, 0], [5, 0]])
    policy.counters._weighted = None
    assert policy.counters.theta_hats()[1] == pytest.approx(1.2)
    assert policy.leaders() == (1, 2)


def test_pie_keeps_leaders_in_top_positions(synthetic_model):
    policy = PbmPiePolicy(synthetic_model.kappa, synthetic_model.num_arms)
    rng = np.random.default_rng(2)
    _run(policy, synthetic_model, 5, rng)
    for _ in range(1000):
        leaders = policy.leaders()
        action = policy.select_action(rng)
        assert action.arms[:2] == leaders[:2]
        policy.update(action, sample_feedback(synthetic_model, action, rng))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_actions_are_valid_and_counts_conserved(kind, synthetic_model):
    policy = build_policy(PolicyConfig(kind=kind), synthetic_model.kappa, 5)
    rounds = 300
    actions = _run(policy, synthetic_model, rounds, np.random.default_rng(3))
    assert all(len(set(arms)) == 3 for arms in actions)
    assert all(0 <= arm < 5 for arms in actions for arm in arms)
    assert policy.round == rounds
    assert policy.counters.plays.sum() == rounds * 3


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_replay_determinism(kind, synthetic_model):
    runs = [
        _run(
            build_policy(PolicyConfig(kind=kind), synthetic_model.kappa, 5),
            synthetic_model,
            200,
            np.random.default_rng(42),
        )
        for _ in range(2)
    ]
    assert runs[0] == runs[1]


def test_update_rejects_misaligned_feedback():
    policy = PbmUcbPolicy(SYNTHETIC_KAPPA, 5)
    with pytest.raises(ValueError, match=r"expecting 3 bits"):
        policy.update((0, 1, 2), (1, 0))
    assert policy.round == 0


def test_rba_credits_duplicate_pick_with_zero():
    policy = RbaKlUcbPolicy((0.9, 0.6), 3)
    rng = np.random.default_rng(5)
    initialization = [((0, 1), (0, 0)), ((1, 2), (0, 0)), ((2, 0), (0, 0))]
    for action, z in initialization:
        policy.select_action(rng)
        policy.update(action, z)
    policy.sub_plays[:] = 10
    policy.sub_rewards[:] = 1
    policy.sub_rewards[:, 0] = 9

    action = policy.select_action(rng)
    assert action.arms[0] == 0
    replacement = action.arms[1]
    assert replacement in (1, 2)
    plays_before = policy.sub_plays.copy()
    rewards_before = policy.sub_rewards.copy()
    policy.update(action, (1, 1))

    assert policy.sub_plays[0, 0] == plays_before[0, 0] + 1
    assert policy.sub_rewards[0, 0] == rewards_before[0, 0] + 1
    assert policy.sub_plays[1, 0] == plays_before[1, 0] + 1
    assert policy.sub_rewards[1, 0] == rewards_before[1, 0]
    assert policy.sub_plays[1, replacement] == plays_before[1, replacement]
    assert policy.sub_rewards[1, replacement] == rewards_before[1, replacement]


def test_rba_exploration_level():
    policy = RbaKlUcbPolicy((0.9,), 3)
    assert policy.exploration_level() == 0.0
    policy.round = 99
    assert policy.exploration_level() == pytest.approx(
        math.log(100) + 3 * math.log(math.log(100))
    )


def test_pbm_ts_records_sampler_diagnostics(synthetic_model):
    policy = PbmTsPolicy(synthetic_model.kappa, 5)
    _run(policy, synthetic_model, 50, np.random.default_rng(6))
    # one draw per arm in every round after initialization
    assert policy.diagnostics.draws == 45 * 5
    assert policy.diagnostics.fallbacks == 0


def test_pbm_ts_envelopes_follow_counts(synthetic_model):
    policy = PbmTsPolicy(synthetic_model.kappa, 5)
    rng = np.random.default_rng(8)
    for rounds in (10, 1, 25):
        _run(policy, synthetic_model, rounds, rng)
        np.testing.assert_array_equal(policy.envelopes(), posterior_envelopes(policy.counters))
    # counters replaced from outside are picked up too
    policy.counters.plays[0] = [40, 30, 20]
    policy.counters.clicks[0] = [10, 5, 2]
    np.testing.assert_array_equal(policy.envelopes(), posterior_envelopes(policy.counters))


def test_bc_mp_ts_and_random_kinds():
    assert isinstance(build_policy(PolicyConfig(kind="bc_mp_ts"), (0.9,), 2), BcMpTsPolicy)
    policy = build_policy(PolicyConfig(kind="random"), (0.9, 0.6), 4)
    assert isinstance(policy, RandomPolicy)
    assert policy.initialization_action() is None


@requires_long_run
@pytest.mark.parametrize("kind", ["pbm_ucb", "pbm_pie", "pbm_ts", "bc_mp_ts", "rba_klucb"])
def test_learners_beat_random_baseline(kind, synthetic_model):
    horizon = 100_000

    def regret(policy_kind):
        policy = build_policy(PolicyConfig(kind=policy_kind), synthetic_model.kappa, 5)
        rng = np.random.default_rng(7)
        total = 0.0
        for _ in range(horizon):
            action = policy.select_action(rng)
            total += gap(synthetic_model, action)
            policy.update(action, sample_feedback(synthetic_model, action, rng))
        return total

    assert regret(kind) * 10 <= regret("random")
