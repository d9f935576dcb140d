"""
orchestrator: リプレイバッファ・フェーズスケジュール・収集・チェックポイント・評価
"""

from dataclasses import replace

import numpy as np
import pytest

from src.chunkpolicy.diffusion import ddim_sample
from src.chunkpolicy.training import chunk_dataset
from src.envkit.demos import DemoSet, collect_demos
from src.envkit.tasks import Trajectory, get_task
from src.expcli.config import with_updates
from src.orchestrator import phases
from src.orchestrator.agent import SearchAgent
from src.orchestrator.evaluation import evaluate
from src.orchestrator.phases import (PhaseSchedule, collect, expert_iteration, latest_checkpoint, load_run_state,
                                     online_round, save_run_state, train_agent, warm_start)
from src.orchestrator.replay import ReplayBuffer, hybrid_sample
from src.residualplanner.mppi import PlanResult
from src.utils.common import CheckpointError, PhaseError


def make_trajectory(length: int, d_o: int = 6, d_a: int = 2) -> Trajectory:
    continuations = np.ones(length, dtype=np.uint8)
    continuations[-1] = 0
    return Trajectory(obs=np.zeros((length, d_o), np.float32), actions=np.zeros((length, d_a), np.float32),
                      continuations=continuations, successes=np.zeros(length, bool),
                      final_obs=np.zeros(d_o, np.float32), success=False, traj_id=-1)


@pytest.fixture
def task():
    return get_task('point_reach')


@pytest.fixture
def demos(task):
    return collect_demos(task, 3, noise_std=0.05, seed=0)


@pytest.fixture
def agent(tiny_config, task):
    return SearchAgent(tiny_config, task, seed=0)


def test_replay_buffer_evicts_oldest_trajectories():
    buffer = ReplayBuffer(capacity=10)
    ids = [buffer.add(make_trajectory(4)) for _ in range(3)]
    assert ids == [0, 1, 2]
    assert [t.traj_id for t in buffer.trajectories] == [1, 2]
    assert buffer.num_transitions == 8
    buffer.add(make_trajectory(10))
    assert [t.traj_id for t in buffer.trajectories] == [3]
    assert buffer.num_transitions <= buffer.capacity
    assert buffer.next_id == 4


def test_replay_buffer_rejects_oversized_trajectory():
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=5).add(make_trajectory(6))
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=0)


def test_replay_buffer_latest():
    buffer = ReplayBuffer()
    buffer.extend(make_trajectory(3) for _ in range(5))
    assert [t.traj_id for t in buffer.latest(2)] == [3, 4]
    assert len(buffer.latest(10)) == 5
    assert buffer.latest(0) == []


def test_replay_buffer_save_and_load(tmp_path, demos, task):
    buffer = ReplayBuffer(capacity=500)
    buffer.extend(demos.trajectories)
    path = tmp_path / 'replay.csdm'
    buffer.save(path, task.name, task.d_o, task.d_a, task.horizon)
    loaded = ReplayBuffer.load(path, 500, [t.traj_id for t in buffer.trajectories], buffer.next_id)
    assert loaded.num_transitions == buffer.num_transitions
    assert loaded.next_id == 3
    for a, b in zip(loaded.trajectories, buffer.trajectories):
        assert a.traj_id == b.traj_id
        np.testing.assert_array_equal(a.actions, b.actions)


def test_hybrid_sample_needs_both_sources(demos, task):
    buffer = ReplayBuffer()
    with pytest.raises(ValueError):
        hybrid_sample(demos, buffer, 4, 8, np.random.default_rng(0))
    buffer.add(make_trajectory(10))
    empty = DemoSet(task.name, task.d_o, task.d_a, task.horizon, [])
    with pytest.raises(ValueError):
        hybrid_sample(empty, buffer, 4, 8, np.random.default_rng(0))
    batch = hybrid_sample(demos, buffer, 4, 8, np.random.default_rng(0))
    assert batch.is_demo.sum() == 2


def test_default_phase_schedule(smoke_config):
    config = with_updates(smoke_config, 'schedule.budget=50000', 'schedule.warm_start_fraction=0.2',
                          'schedule.warm_start_multiplier=1.5', 'schedule.round_env_steps=3500',
                          'schedule.distill_every=10')
    schedule = PhaseSchedule.from_config(config)
    assert schedule.warm_start_steps == 10000
    assert schedule.warm_start_grad_steps(10000) == 15000
    assert schedule.num_rounds == 12
    assert schedule.round_steps(1) == 3500
    assert schedule.round_steps(12) == 40000 - 11 * 3500
    assert not schedule.distills_on(0)
    assert not schedule.distills_on(5)
    assert schedule.distills_on(10)


def test_smoke_phase_schedule(smoke_config):
    schedule = PhaseSchedule.from_config(smoke_config)
    assert schedule.warm_start_steps == 60
    assert schedule.warm_start_grad_steps(60) == 6
    assert schedule.num_rounds == 2
    assert schedule.distills_on(1)


def test_phase_schedule_validation(smoke_config):
    schedule = PhaseSchedule.from_config(smoke_config)
    with pytest.raises(ValueError):
        replace(schedule, warm_start_fraction=1.0)
    with pytest.raises(ValueError):
        replace(schedule, round_env_steps=0)
    no_warm = replace(schedule, warm_start_fraction=0.0)
    assert no_warm.warm_start_steps == 0
    assert no_warm.num_rounds == 3


def test_collect_gathers_exact_step_count(agent):
    buffer = ReplayBuffer()
    episodes = collect(agent, buffer, 25, use_planner=False, exploration_std=0.1)
    assert buffer.num_transitions == 25
    assert sum(e.steps for e in episodes) == 25
    collect(agent, buffer, 6, use_planner=True, exploration_std=0.0)
    assert buffer.num_transitions == 31


def test_train_models_step_updates_counters(agent, demos):
    buffer = ReplayBuffer()
    collect(agent, buffer, 20, use_planner=False, exploration_std=0.1)
    before = agent.wm.store['enc/w0'].copy()
    rows = [agent.train_models_step(demos, buffer) for _ in range(3)]
    assert agent.wm_steps == 3
    assert agent.rm_updates == 1
    assert 'wm_loss' in rows[0]
    assert all(np.isfinite(v) for row in rows for v in row.values())
    assert not np.array_equal(before, agent.wm.store['enc/w0'])


def test_pretrain_policy_returns_loss(agent, demos):
    loss = agent.pretrain_policy(demos, iterations=5)
    assert np.isfinite(loss)


def test_warm_start_needs_demos(agent, task, tiny_config):
    empty = DemoSet(task.name, task.d_o, task.d_a, task.horizon, [])
    schedule = PhaseSchedule.from_config(tiny_config)
    with pytest.raises(ValueError):
        warm_start(agent, empty, ReplayBuffer(), schedule)
    with pytest.raises(PhaseError) as excinfo:
        train_agent(agent, empty, schedule, lambda report, result: None)
    assert excinfo.value.phase == 'warm_start'


def test_run_state_round_trip(tmp_path, agent, tiny_config, task):
    buffer = ReplayBuffer(capacity=1000)
    collect(agent, buffer, 15, use_planner=False, exploration_std=0.1)
    save_run_state(tmp_path, agent, buffer, 2, 55, 'abc123')
    assert latest_checkpoint(tmp_path).name == 'round_002'

    other = SearchAgent(tiny_config, task, seed=9)
    loaded, round_index, env_steps = load_run_state(tmp_path, other, 'abc123')
    assert (round_index, env_steps) == (2, 55)
    assert [t.traj_id for t in loaded.trajectories] == [t.traj_id for t in buffer.trajectories]
    assert loaded.next_id == buffer.next_id
    for key in agent.policy.store:
        np.testing.assert_array_equal(other.policy.store[key], agent.policy.store[key])
    assert other.streams.planner.random() == agent.streams.planner.random()


def test_run_state_rejects_other_config(tmp_path, agent, tiny_config, task):
    buffer = ReplayBuffer()
    buffer.add(make_trajectory(5))
    save_run_state(tmp_path, agent, buffer, 0, 5, 'abc123')
    with pytest.raises(CheckpointError):
        load_run_state(tmp_path, SearchAgent(tiny_config, task, seed=0), 'ffff')
    with pytest.raises(CheckpointError):
        load_run_state(tmp_path / 'missing', agent)


def test_zero_iteration_evaluation_equals_base_policy(agent, task):
    stack = agent.stack()
    searched = evaluate(stack, task, 2, seed_offset=500, use_planner=True, iterations=0)
    base = evaluate(stack, task, 2, seed_offset=500, use_planner=False)
    assert searched.successes == base.successes
    assert np.isfinite(searched.ddim_sample_seconds)
    assert np.isfinite(base.ddim_sample_seconds)
    for a, b in zip(searched.trajectories, base.trajectories):
        np.testing.assert_array_equal(a.actions, b.actions)


def test_evaluation_is_reproducible(agent, task):
    first = evaluate(agent.stack(), task, 1, seed_offset=7, use_planner=True, record_rm=True)
    second = evaluate(agent.stack(), task, 1, seed_offset=7, use_planner=True, record_rm=True)
    np.testing.assert_array_equal(first.trajectories[0].actions, second.trajectories[0].actions)
    assert len(first.rm_traces) == len(first.trajectories[0])
    assert np.isfinite(first.mean_best_q)


def test_online_round_uses_half_demo_batches(agent, demos, tiny_config, monkeypatch):
    batches = []

    def recording_sample(*args):
        batch = hybrid_sample(*args)
        batches.append(batch)
        return batch

    monkeypatch.setattr('src.orchestrator.agent.hybrid_sample', recording_sample)
    schedule = PhaseSchedule.from_config(tiny_config)
    buffer = ReplayBuffer(capacity=10000)
    collect(agent, buffer, 20, use_planner=False, exploration_std=0.1)
    before = buffer.num_transitions

    report = online_round(agent, demos, buffer, schedule, 1)
    assert len(batches) == schedule.round_grad_steps
    for batch in batches:
        assert 2 * int(batch.is_demo.sum()) == batch.batch_size
    assert report.env_steps == schedule.round_steps(1)
    assert sum(e.steps for e in report.episodes) == report.env_steps
    assert buffer.num_transitions - before == report.env_steps
    assert report.distilled


def fixed_plan(target: np.ndarray):
    def fake(context, *args, **kwargs):
        return PlanResult(target.copy(), np.zeros_like(target), None)
    return fake


def test_expert_iteration_labels_with_planner_chunks(agent, demos, tiny_config, monkeypatch):
    target = np.full((tiny_config.policy.chunk, agent.task.d_a), 0.6, np.float32)
    monkeypatch.setattr('src.orchestrator.phases.plan', fixed_plan(target))
    fitted = []
    real_fit = phases.bc_fit_from_settings

    def recording_fit(policy, dataset, *args, **kwargs):
        fitted.append((dataset, kwargs.get('mix_with')))
        return real_fit(policy, dataset, *args, **kwargs)

    monkeypatch.setattr('src.orchestrator.phases.bc_fit_from_settings', recording_fit)
    buffer = ReplayBuffer()
    collect(agent, buffer, 30, use_planner=False, exploration_std=0.1)
    schedule = PhaseSchedule.from_config(tiny_config)
    before = agent.policy.store['eps/w0'].copy()

    loss = expert_iteration(agent, demos, buffer, schedule)
    (dataset, mix_with), = fitted
    latest = buffer.latest(schedule.relabel_trajectories)
    assert len(dataset) == sum(len(t) for t in latest)
    np.testing.assert_array_equal(dataset.chunks, np.broadcast_to(target, dataset.chunks.shape))
    assert len(mix_with) == sum(len(t) for t in demos.trajectories)
    assert np.isfinite(loss)
    assert not np.array_equal(before, agent.policy.store['eps/w0'])


def flat_agent(config, task, demos=None) -> SearchAgent:
    agent = SearchAgent(config, task, seed=0)
    if demos is not None:
        agent.pretrain_policy(demos, iterations=200)
    agent.rm.store.assign({k: np.zeros_like(v) for k, v in agent.rm.store.items()})
    agent.critic.store.assign({k: np.zeros_like(v) for k, v in agent.critic.store.items()})
    agent.critic.update_slow(0.0)
    return agent


def test_flat_scores_relabel_with_base_chunks(tiny_config, task, demos, monkeypatch):
    config = with_updates(tiny_config, 'planner.mode=mean')
    agent = flat_agent(config, task)
    planned = []
    real_plan = phases.plan

    def recording_plan(*args, **kwargs):
        result = real_plan(*args, **kwargs)
        planned.append(result)
        return result

    monkeypatch.setattr('src.orchestrator.phases.plan', recording_plan)
    buffer = ReplayBuffer()
    collect(agent, buffer, 30, use_planner=False, exploration_std=0.1)
    expert_iteration(agent, demos, buffer, PhaseSchedule.from_config(config))
    assert planned
    for result in planned:
        np.testing.assert_allclose(result.chunk, result.nominal, atol=1e-6)


def policy_drift(agent, contexts, before: np.ndarray) -> float:
    after = ddim_sample(agent.policy, contexts, np.random.default_rng(0))
    return float(np.abs(after - before).mean())


def test_flat_scores_keep_distilled_policy_near_base(tiny_config, task, demos, monkeypatch):
    config = with_updates(tiny_config, 'planner.mode=mean', 'policy.distill_iterations=50',
                          'policy.lr_max=0.003')
    schedule = PhaseSchedule.from_config(config)
    flat, shifted = flat_agent(config, task, demos), flat_agent(config, task, demos)
    buffer = ReplayBuffer()
    collect(flat, buffer, 30, use_planner=False, exploration_std=0.1)
    contexts = chunk_dataset(buffer.latest(schedule.relabel_trajectories), config.policy.chunk).contexts
    before = ddim_sample(flat.policy, contexts, np.random.default_rng(0))

    expert_iteration(flat, demos, buffer, schedule)
    target = np.full((config.policy.chunk, task.d_a), -1.0, np.float32)
    monkeypatch.setattr('src.orchestrator.phases.plan', fixed_plan(target))
    expert_iteration(shifted, demos, buffer, schedule)
    assert policy_drift(flat, contexts, before) < policy_drift(shifted, contexts, before)


@pytest.mark.slow
def test_expert_iteration_moves_policy_toward_planner_chunks(tiny_config, task, demos, monkeypatch):
    config = with_updates(tiny_config, 'policy.distill_iterations=300', 'policy.lr_max=0.003')
    agent = SearchAgent(config, task, seed=0)
    target = np.full((config.policy.chunk, task.d_a), 0.6, np.float32)
    monkeypatch.setattr('src.orchestrator.phases.plan', fixed_plan(target))
    schedule = PhaseSchedule.from_config(config)
    buffer = ReplayBuffer()
    collect(agent, buffer, 40, use_planner=False, exploration_std=0.1)
    contexts = chunk_dataset(buffer.latest(schedule.relabel_trajectories), config.policy.chunk).contexts

    def gap() -> float:
        samples = ddim_sample(agent.policy, contexts, np.random.default_rng(0))
        return float(np.abs(samples - target).mean())

    before = gap()
    expert_iteration(agent, demos, buffer, schedule)
    assert gap() < before


@pytest.mark.slow
def test_base_policy_success_drops_with_process_noise(smoke_config, task):
    config = with_updates(smoke_config, 'task.demos=20', 'policy.units=64', 'policy.lr_max=0.001',
                          'policy.lr_min=0.0001')
    demos = collect_demos(task, 20, noise_std=0.05, seed=0)
    agent = SearchAgent(config, task, seed=0)
    agent.pretrain_policy(demos, iterations=2000)
    stack = agent.stack()
    quiet = evaluate(stack, task, 20, seed_offset=300, use_planner=False, process_noise_std=0.0)
    noisy = evaluate(stack, task, 20, seed_offset=300, use_planner=False, process_noise_std=0.5)
    assert noisy.success_rate < quiet.success_rate
