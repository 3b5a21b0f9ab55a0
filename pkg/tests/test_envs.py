import json

import numpy as np
import pytest

from gentle.envs import (POINT_MASS, POINT_ROBOT, STATE_BOX, TaskSpec, env_step,
                         get_config, initial_state, sample_tasks, true_model)
from gentle.errors import ConfigError
from gentle.rng import Rng


def test_sample_point_robot_goals_in_unit_box():
    for spec in sample_tasks(POINT_ROBOT, 50, 3):
        assert np.all(np.abs(spec.goal) <= 1.0)


def test_sample_point_mass_multiplier_range():
    lo, hi = 1.5 ** -3, 1.5 ** 3
    for spec in sample_tasks(POINT_MASS, 50, 3):
        for key in ("damping_mult", "mass_mult"):
            assert lo <= spec.params[key] <= hi


def test_sampling_deterministic():
    a = sample_tasks(POINT_ROBOT, 5, 9)
    b = sample_tasks(POINT_ROBOT, 5, 9)
    assert all(np.array_equal(x.goal, y.goal) for x, y in zip(a, b))


def test_train_test_splits_disjoint_streams():
    train = sample_tasks(POINT_ROBOT, 5, 9, split="train")
    test = sample_tasks(POINT_ROBOT, 5, 9, split="test")
    assert not any(np.array_equal(x.goal, y.goal) for x in train for y in test)


def test_unknown_family_rejected():
    with pytest.raises(ConfigError):
        sample_tasks("mystery", 1, 0)


def test_task_distribution_coverage():
    goals = np.array([s.goal for s in sample_tasks(POINT_ROBOT, 10_000, 1234)])
    assert np.all(np.abs(goals.mean(axis=0)) < 0.05)
    assert np.all(goals.min(axis=0) < -0.99)
    assert np.all(goals.max(axis=0) > 0.99)


def test_point_robot_step_at_goal_zero_action():
    spec = TaskSpec(POINT_ROBOT, {"goal": (0.4, -0.2)})
    s = spec.goal.copy()
    s_next, r = env_step(spec, s, np.zeros(2))
    assert np.array_equal(s_next, s)
    assert r == 0.0


def test_point_robot_reward_nonpositive_and_zero_iff_goal():
    spec = TaskSpec(POINT_ROBOT, {"goal": (0.1, 0.1)})
    rng = Rng(4)
    for _ in range(200):
        s = rng.uniform(-1, 1, 2)
        a = rng.uniform(-0.1, 0.1, 2)
        s_next, r = env_step(spec, s, a)
        assert r <= 0.0
        assert (r == 0.0) == np.array_equal(s_next, spec.goal)


def test_point_robot_action_clipped_before_dynamics():
    spec = TaskSpec(POINT_ROBOT, {"goal": (0.0, 0.0)})
    s_next, _ = env_step(spec, np.zeros(2), np.array([5.0, -5.0]))
    assert np.allclose(s_next, [0.1, -0.1])


def test_point_mass_default_multipliers_plug_in():
    spec = TaskSpec(POINT_MASS, {"damping_mult": 1.0, "mass_mult": 1.0})
    s = np.zeros(4)
    s_next, r = env_step(spec, s, np.array([1.0, 0.0]))
    assert np.allclose(s_next[2:], [0.1, 0.0])  # v' = (a/m) * dt
    assert np.isclose(r, 0.1)
    assert np.allclose(s_next[:2], [0.01, 0.0])  # x' = x + v' dt


def test_point_mass_mu_zero_matches_default_dynamics_trajectory():
    default = TaskSpec(POINT_MASS, {"damping_mult": 1.0, "mass_mult": 1.0})
    explicit = TaskSpec(POINT_MASS, {"damping_mult": 1.5 ** 0, "mass_mult": 1.5 ** 0})
    s1 = s2 = np.zeros(4)
    rng = Rng(5)
    for _ in range(50):
        a = rng.uniform(-1, 1, 2)
        s1, r1 = env_step(default, s1, a)
        s2, r2 = env_step(explicit, s2, a)
        assert np.array_equal(s1, s2) and r1 == r2


def test_point_mass_velocity_bounded_over_long_horizon():
    # Heavier damping multiplier means stronger decay; the whole sampled
    # range must stay contractive so returns remain desk-scale.
    for spec in sample_tasks(POINT_MASS, 20, 77):
        s = np.zeros(4)
        for _ in range(200):
            s, r = env_step(spec, s, np.array([1.0, 0.0]))
        assert np.all(np.abs(s) <= STATE_BOX)
        assert abs(r) <= STATE_BOX


def test_env_step_deterministic():
    for family in (POINT_ROBOT, POINT_MASS):
        spec = sample_tasks(family, 1, 0)[0]
        cfg = get_config(family)
        s = initial_state(spec, Rng(1))
        a = Rng(2).uniform(-cfg.action_bound, cfg.action_bound, cfg.action_dim)
        r1 = env_step(spec, s, a)
        r2 = env_step(spec, s, a)
        assert np.array_equal(r1[0], r2[0]) and r1[1] == r2[1]


def test_env_step_rejects_nonfinite():
    spec = sample_tasks(POINT_ROBOT, 1, 0)[0]
    with pytest.raises(ConfigError):
        env_step(spec, np.array([np.nan, 0.0]), np.zeros(2))
    with pytest.raises(ConfigError):
        env_step(spec, np.zeros(2), np.array([np.inf, 0.0]))


def test_true_model_agrees_with_env_step_exactly():
    for family in (POINT_ROBOT, POINT_MASS):
        spec = sample_tasks(family, 1, 11)[0]
        cfg = get_config(family)
        rng = Rng(12)
        for _ in range(1000):
            s = rng.uniform(-1, 1, cfg.state_dim)
            a = rng.uniform(-cfg.action_bound, cfg.action_bound, cfg.action_dim)
            y = true_model(spec, np.concatenate([s, a]))
            s_next, r = env_step(spec, s, a)
            if cfg.reward_mode == "reward_only":
                assert y.shape == (1,)
                assert y[0] == r
            else:
                assert np.array_equal(y[:-1], s_next) and y[-1] == r


def test_true_model_reward_only_dimension():
    spec = sample_tasks(POINT_ROBOT, 1, 0)[0]
    y = true_model(spec, np.zeros(4))
    assert y.shape == (1,)


def test_true_model_repeatable():
    spec = sample_tasks(POINT_MASS, 1, 0)[0]
    x = Rng(0).uniform(-1, 1, 6)
    assert np.array_equal(true_model(spec, x), true_model(spec, x))


def test_spec_json_round_trip():
    for family in (POINT_ROBOT, POINT_MASS):
        spec = sample_tasks(family, 1, 5)[0]
        blob = json.dumps(spec.to_json())
        back = TaskSpec.from_json(json.loads(blob))
        assert back == spec


def test_initial_states():
    pr = sample_tasks(POINT_ROBOT, 1, 0)[0]
    starts = np.array([initial_state(pr, Rng(i)) for i in range(200)])
    assert np.all(np.abs(starts) <= 1.0)
    assert starts.std() > 0.4  # spread over the whole task box
    pm = sample_tasks(POINT_MASS, 1, 0)[0]
    assert np.array_equal(initial_state(pm, Rng(3)), np.zeros(4))


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(POINT_ROBOT, {"goal": (1.5, 0.0)})
    with pytest.raises(ConfigError):
        TaskSpec(POINT_MASS, {"damping_mult": 9.0, "mass_mult": 1.0})
