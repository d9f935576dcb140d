"""
envkit: タスク環境・エキスパート・デモファイル
"""

import numpy as np
import pytest

from src.envkit.demos import collect_demos, load_demos, rollout_expert, save_demos
from src.envkit.tasks import Trajectory, get_task, list_tasks, make_env, reset
from src.utils.common import EnvContractError, UnknownTaskError


def test_registered_tasks():
    assert list_tasks() == ['peg_slot_2d', 'point_reach', 'point_reach_obstacle']
    task = get_task('peg_slot_2d')
    assert (task.d_o, task.d_a) == (7, 3)


def test_unknown_task():
    with pytest.raises(UnknownTaskError):
        get_task('cartpole')
    with pytest.raises(KeyError):
        make_env('cartpole')


@pytest.mark.parametrize('name', ['point_reach', 'point_reach_obstacle', 'peg_slot_2d'])
def test_reset_is_deterministic(name):
    _, obs_a = reset(name, seed=7)
    _, obs_b = reset(name, seed=7)
    _, obs_c = reset(name, seed=8)
    assert obs_a.shape == (get_task(name).d_o,)
    np.testing.assert_array_equal(obs_a, obs_b)
    assert not np.array_equal(obs_a, obs_c)


def test_initial_state_is_not_successful():
    task = get_task('point_reach')
    for seed in range(20):
        env, obs = reset(task, seed)
        assert np.linalg.norm(obs[4:6]) > task.geometry['success_radius']


def test_zero_action_without_noise_keeps_position():
    env, obs = reset('point_reach', seed=0, process_noise_std=0.0)
    result = env.step(np.zeros(2))
    np.testing.assert_allclose(result.obs[:2], obs[:2])
    assert result.continuation == 1


def test_horizon_terminates_episode():
    task = get_task('point_reach')
    env, _ = reset(task, seed=1, process_noise_std=0.0)
    for t in range(task.horizon):
        result = env.step(np.zeros(2))
    assert result.continuation == 0
    assert not result.success
    with pytest.raises(EnvContractError):
        env.step(np.zeros(2))


def test_step_rejects_bad_actions():
    env, _ = reset('point_reach', seed=0)
    with pytest.raises(EnvContractError):
        env.step(np.zeros(3))
    with pytest.raises(EnvContractError):
        env.step(np.array([np.nan, 0.0]))
    with pytest.raises(EnvContractError):
        make_env('point_reach').step(np.zeros(2))


def test_obstacle_entry_gets_stuck():
    env, obs = reset('point_reach_obstacle', seed=3, process_noise_std=0.0)
    env.state.pos = env.state.obstacle.copy()
    env.state.pos[0] -= 0.3
    for _ in range(10):
        result = env.step(np.array([1.0, 0.0]))
    assert env.state.stuck
    np.testing.assert_array_equal(result.obs[2:4], np.zeros(2))


@pytest.mark.parametrize('name', list_tasks())
def test_expert_solves_every_task_without_noise(name, rng):
    task = get_task(name)
    for seed in range(100):
        traj = rollout_expert(task, seed, noise_std=0.0, rng=rng, process_noise_std=0.0)
        assert traj.success
        assert len(traj) <= task.horizon
        assert traj.continuations[-1] == 0
        assert np.all(np.abs(traj.actions) <= 1.0)


def test_collect_demos_only_keeps_successes():
    demos = collect_demos('point_reach', 4, noise_std=0.05, seed=0)
    assert len(demos) == 4
    assert all(t.success for t in demos)
    assert [t.traj_id for t in demos] == [0, 1, 2, 3]


def test_demo_file_is_reproducible(tmp_path):
    first, second = tmp_path / 'a.csdm', tmp_path / 'b.csdm'
    save_demos(first, collect_demos('point_reach', 3, noise_std=0.05, seed=11))
    save_demos(second, collect_demos('point_reach', 3, noise_std=0.05, seed=11))
    assert first.read_bytes() == second.read_bytes()

    loaded = load_demos(first)
    original = collect_demos('point_reach', 3, noise_std=0.05, seed=11)
    assert loaded.task_name == 'point_reach'
    for a, b in zip(loaded, original):
        np.testing.assert_array_equal(a.obs, b.obs)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.continuations, b.continuations)
        assert a.success == b.success


def test_load_demos_rejects_other_files(tmp_path):
    path = tmp_path / 'bad.csdm'
    path.write_bytes(b'XXXX\x01\x00\x00\x00')
    with pytest.raises(ValueError):
        load_demos(path)


def test_sequence_arrays_shift_actions():
    demos = collect_demos('point_reach', 1, noise_std=0.0, seed=2)
    traj: Trajectory = demos.trajectories[0]
    obs, prev_actions, cont = traj.sequence_arrays()
    assert len(obs) == len(traj) + 1
    np.testing.assert_array_equal(prev_actions[0], np.zeros(2))
    np.testing.assert_array_equal(prev_actions[1:], traj.actions)
    assert cont[0] == 1.0 and cont[-1] == 0.0
