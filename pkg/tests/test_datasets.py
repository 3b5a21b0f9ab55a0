import numpy as np
import pytest

from gentle.datasets import (MIXED_TIERS, ScriptedPolicy, TaskDataset, Transition,
                             collect_dataset, collect_suite, episode_return,
                             expert_action, load_dataset, load_manifest, load_suite,
                             optimal_return_point_robot, save_dataset, scripted_policy,
                             verify_dataset)
from gentle.envs import POINT_MASS, POINT_ROBOT, TaskSpec, env_step, get_config, initial_state, sample_tasks
from gentle.errors import ConfigError, DataFormatError, MissingInputError
from gentle.evaluation import run_episode
from gentle.rng import Rng


def test_expert_zero_action_at_goal():
    spec = TaskSpec(POINT_ROBOT, {"goal": (0.3, -0.7)})
    a = expert_action(spec, spec.goal)
    assert np.array_equal(a, np.zeros(2))


def test_expert_clipped_direction():
    spec = TaskSpec(POINT_ROBOT, {"goal": (1.0, 0.0)})
    a = expert_action(spec, np.zeros(2))
    assert np.allclose(a, [0.1, 0.0])


def test_expert_point_mass_full_forward():
    spec = TaskSpec(POINT_MASS, {"damping_mult": 1.0, "mass_mult": 1.0})
    a = expert_action(spec, np.zeros(4))
    assert np.array_equal(a, [1.0, 0.0])


def test_scripted_policy_requires_known_quality():
    spec = sample_tasks(POINT_ROBOT, 1, 0)[0]
    with pytest.raises(ConfigError):
        ScriptedPolicy(spec, "sloppy", Rng(0))
    with pytest.raises(ConfigError):
        scripted_policy(spec, np.zeros(2), "mixed", Rng(0))  # needs noise_scale


def test_scripted_policy_actions_within_bound():
    spec = sample_tasks(POINT_ROBOT, 1, 1)[0]
    pol = ScriptedPolicy(spec, "medium", Rng(2))
    pol.begin_trajectory()
    for _ in range(100):
        a = pol(np.zeros(2))
        assert np.all(np.abs(a) <= 0.1)


def test_quality_return_ordering():
    # Monte-Carlo oracle: expert > medium > uniform-random, gaps > 3 SEs.
    specs = sample_tasks(POINT_ROBOT, 5, 21)
    episodes = 40

    def mean_se(returns):
        r = np.asarray(returns)
        return r.mean(), r.std() / np.sqrt(r.size)

    returns = {"expert": [], "medium": [], "random": []}
    for t, spec in enumerate(specs):
        rng = Rng(100 + t)
        for quality in ("expert", "medium"):
            pol = ScriptedPolicy(spec, quality, rng.split(quality))
            for ep in range(episodes):
                pol.begin_trajectory()
                ret, _ = run_episode(spec, pol, rng.split(quality, ep))
                returns[quality].append(ret)
        arng = rng.split("rand-actions")
        for ep in range(episodes):
            ret, _ = run_episode(spec, lambda s: arng.uniform(-0.1, 0.1, 2),
                                 rng.split("random", ep))
            returns["random"].append(ret)

    m_e, se_e = mean_se(returns["expert"])
    m_m, se_m = mean_se(returns["medium"])
    m_r, se_r = mean_se(returns["random"])
    assert m_e - m_m > 3 * np.hypot(se_e, se_m)
    assert m_m - m_r > 3 * np.hypot(se_m, se_r)


def test_quality_monotone_in_noise_level():
    spec = sample_tasks(POINT_ROBOT, 1, 31)[0]
    means = []
    for level in (0.0, 0.05, 0.1):
        rng = Rng(8).split("mono", repr(level))
        arng = rng.split("actions")
        rets = []
        for ep in range(60):
            pol = lambda s: np.clip(expert_action(spec, s)
                                    + (arng.normal(0, level, 2) if level else 0.0),
                                    -0.1, 0.1)
            ret, _ = run_episode(spec, pol, rng.split(ep))
            rets.append(ret)
        means.append(np.mean(rets))
    assert means[0] >= means[1] >= means[2]


def test_expert_adequacy_against_analytic_optimum():
    # Expert return must reach >= 0.95 x the closed-form optimum.
    specs = sample_tasks(POINT_ROBOT, 100, 17)
    total_expert, total_best = 0.0, 0.0
    for t, spec in enumerate(specs):
        rng = Rng(300 + t)
        s0 = initial_state(spec, rng.split("init"))
        pol = ScriptedPolicy(spec, "expert", rng.split("pol"))
        ret = 0.0
        s = s0
        for _ in range(20):
            s, r = env_step(spec, s, pol(s))
            ret += r
        total_expert += ret
        total_best += optimal_return_point_robot(spec, s0, 20)
    # Returns are negative; adequate means within 5% of the optimum.
    assert total_expert >= 1.05 * total_best
    assert total_expert <= total_best + 1e-9


def test_collect_counts_and_structure():
    spec = sample_tasks(POINT_ROBOT, 1, 2)[0]
    ds = collect_dataset(spec, "expert", 100, 20, seed=5)
    assert len(ds) == 2000
    verify_dataset(ds, horizon=20)


def test_collect_replay_consistency_exact():
    spec = sample_tasks(POINT_MASS, 1, 3)[0]
    ds = collect_dataset(spec, "medium", 5, 50, seed=6)
    for t in ds.transitions:
        s_next, r = env_step(spec, t.s, t.a)
        assert np.array_equal(s_next, t.s_next)
        assert r == t.r


def test_collect_deterministic_and_file_identical(tmp_path):
    spec = sample_tasks(POINT_ROBOT, 1, 4)[0]
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    save_dataset(collect_dataset(spec, "mixed", 10, 20, seed=7), p1)
    save_dataset(collect_dataset(spec, "mixed", 10, 20, seed=7), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_save_load_round_trip_exact(tmp_path):
    spec = sample_tasks(POINT_MASS, 1, 5)[0]
    ds = collect_dataset(spec, "expert", 3, 50, seed=8, task_id=4)
    path = tmp_path / "task.csv"
    save_dataset(ds, path)
    back = load_dataset(path, spec, task_id=4, quality="expert")
    assert len(back) == len(ds)
    for a, b in zip(ds.transitions, back.transitions):
        assert np.array_equal(a.s, b.s)
        assert np.array_equal(a.a, b.a)
        assert np.array_equal(a.s_next, b.s_next)
        assert a.r == b.r
        assert (a.traj_id, a.step_idx) == (b.traj_id, b.step_idx)


def test_load_missing_file_raises(tmp_path):
    spec = sample_tasks(POINT_ROBOT, 1, 0)[0]
    with pytest.raises(MissingInputError):
        load_dataset(tmp_path / "nope.csv", spec, 0, "expert")


def test_truncated_file_row_count_error(tmp_path):
    spec = sample_tasks(POINT_ROBOT, 1, 6)[0]
    ds = collect_dataset(spec, "expert", 2, 20, seed=9)
    path = tmp_path / "task.csv"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(DataFormatError) as err:
        load_dataset(path, spec, 0, "expert", expected_rows=40)
    assert "task.csv" in str(err.value)


def test_manifest_round_trip_and_schema_check(tmp_path):
    collect_suite(POINT_ROBOT, "expert", n_train=2, n_test=1, n_traj=3, seed=1,
                  out_dir=tmp_path)
    manifest, datasets = load_suite(tmp_path, split="train")
    assert manifest.family == POINT_ROBOT
    assert len(datasets) == 2
    assert all(len(ds) == 3 * 20 for ds in datasets)
    _, test_sets = load_suite(tmp_path, split="test")
    assert len(test_sets) == 1

    # Unknown schema version is rejected loudly.
    import json
    mpath = tmp_path / "manifest.json"
    blob = json.loads(mpath.read_text())
    blob["schema_version"] = 99
    mpath.write_text(json.dumps(blob))
    with pytest.raises(DataFormatError) as err:
        load_manifest(tmp_path)
    assert "99" in str(err.value)


def test_trajectory_chain_validation(tmp_path):
    spec = sample_tasks(POINT_ROBOT, 1, 7)[0]
    ds = collect_dataset(spec, "expert", 2, 20, seed=10)
    ds.transitions[1] = Transition(ds.transitions[1].s + 1.0, ds.transitions[1].a,
                                   ds.transitions[1].s_next, ds.transitions[1].r, 0, 1)
    with pytest.raises(DataFormatError):
        verify_dataset(ds, horizon=20)


def test_mixed_quality_draws_trajectory_tiers():
    spec = sample_tasks(POINT_ROBOT, 1, 8)[0]
    pol = ScriptedPolicy(spec, "mixed", Rng(11))
    tiers = set()
    for _ in range(200):
        pol.begin_trajectory()
        tiers.add(round(pol.noise_scale / get_config(POINT_ROBOT).action_bound, 2))
    assert tiers == {round(t, 2) for t in MIXED_TIERS}
