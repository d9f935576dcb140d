"""
学習ループ: ウォームスタート → オンライン微調整 → 事後蒸留
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from src.chunkpolicy.diffusion import obs_context
from src.chunkpolicy.training import ChunkDataset, bc_fit_from_settings, chunk_dataset
from src.envkit.demos import DemoSet
from src.envkit.tasks import Trajectory, make_env
from src.orchestrator.agent import SearchAgent
from src.orchestrator.evaluation import EvalResult, evaluate
from src.orchestrator.replay import ReplayBuffer
from src.residualplanner.mpc import EpisodeResult, mpc_execute
from src.residualplanner.mppi import plan
from src.utils.common import (CheckpointError, ChunksearchError, PhaseError, ensure_data_directory)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhaseSchedule:
    budget: int
    warm_start_fraction: float
    warm_start_multiplier: float
    round_env_steps: int
    round_grad_steps: int
    rm_every: int
    distill_every: int
    relabel_trajectories: int
    distill_iterations: int
    exploration_std: float

    def __post_init__(self):
        if not 0.0 <= self.warm_start_fraction < 1.0:
            raise ValueError(f"warm start fraction must be in [0, 1): {self.warm_start_fraction}")
        counts = (self.budget, self.round_env_steps, self.round_grad_steps, self.rm_every,
                  self.distill_every, self.relabel_trajectories, self.distill_iterations)
        if min(counts) < 1:
            raise ValueError(f"schedule counts must be positive: {counts}")

    @classmethod
    def from_config(cls, config) -> 'PhaseSchedule':
        s = config.schedule
        return cls(budget=s.budget, warm_start_fraction=s.warm_start_fraction,
                   warm_start_multiplier=s.warm_start_multiplier, round_env_steps=s.round_env_steps,
                   round_grad_steps=s.round_grad_steps, rm_every=s.rm_every, distill_every=s.distill_every,
                   relabel_trajectories=s.relabel_trajectories,
                   distill_iterations=config.policy.distill_iterations, exploration_std=s.exploration_std)

    @property
    def warm_start_steps(self) -> int:
        return int(round(self.warm_start_fraction * self.budget))

    def warm_start_grad_steps(self, transitions: int) -> int:
        return int(round(self.warm_start_multiplier * transitions))

    @property
    def num_rounds(self) -> int:
        remaining = max(self.budget - self.warm_start_steps, 0)
        return math.ceil(remaining / self.round_env_steps)

    def round_steps(self, round_index: int) -> int:
        """ラウンドで集める遷移数（最後のラウンドは予算の残りだけ）"""
        spent = self.warm_start_steps + (round_index - 1) * self.round_env_steps
        return max(min(self.round_env_steps, self.budget - spent), 0)

    @property
    def total_steps(self) -> int:
        return self.warm_start_steps + sum(self.round_steps(r) for r in range(1, self.num_rounds + 1))

    def distills_on(self, round_index: int) -> bool:
        return round_index > 0 and round_index % self.distill_every == 0


@dataclass
class PhaseReport:
    phase: str
    round_index: int
    env_steps: int
    diagnostics: Dict[str, float] = field(default_factory=dict)
    planner_best_q: float = float('nan')
    planner_mu_norm: float = float('nan')
    distilled: bool = False
    episodes: List[EpisodeResult] = field(default_factory=list, repr=False)


def collect(agent: SearchAgent, buffer: ReplayBuffer, steps: int, use_planner: bool,
            exploration_std: float) -> List[EpisodeResult]:
    """ちょうど steps 遷移を集めてバッファに追加（最後のエピソードは途中で打ち切る）"""
    stack = agent.stack()
    task = agent.task
    process_noise = agent.config.task.process_noise_std
    results = []
    collected = 0
    while collected < steps:
        env = make_env(task, process_noise)
        obs = env.reset(int(agent.streams.env.integers(0, 2**31 - 1)))
        result = mpc_execute(env, obs, stack, agent.streams, use_planner=use_planner,
                             exploration_std=exploration_std, max_steps=steps - collected)
        buffer.add(result.trajectory)
        collected += result.steps
        results.append(result)
    return results


def _mean_diagnostics(rows: List[Dict[str, float]]) -> Dict[str, float]:
    keys = sorted({k for row in rows for k in row})
    return {k: float(np.mean([row[k] for row in rows if k in row])) for k in keys}


def train_models(agent: SearchAgent, demos: DemoSet, buffer: ReplayBuffer, steps: int) -> Dict[str, float]:
    rows = [agent.train_models_step(demos, buffer) for _ in range(steps)]
    return _mean_diagnostics(rows) if rows else {}


def warm_start(agent: SearchAgent, demos: DemoSet, buffer: ReplayBuffer, schedule: PhaseSchedule) -> PhaseReport:
    """ベース方策（ブレンドあり）のロールアウトを集め、世界モデル・報酬モデル・クリティックを事前学習"""
    if len(demos) == 0:
        raise ValueError("warm start needs expert demonstrations")
    steps = schedule.warm_start_steps
    report = PhaseReport('warm_start', 0, 0)
    if steps == 0:
        logger.info("warm start skipped (fraction 0)")
        return report
    report.episodes = collect(agent, buffer, steps, use_planner=False, exploration_std=schedule.exploration_std)
    report.env_steps = steps
    grad_steps = schedule.warm_start_grad_steps(steps)
    logger.info("warm start: %d env steps, %d gradient steps", steps, grad_steps)
    report.diagnostics = train_models(agent, demos, buffer, grad_steps)
    return report


def relabel_trajectory(agent: SearchAgent, traj: Trajectory) -> ChunkDataset:
    """軌跡の各観測でプランナーを呼び、補正済みチャンクをラベルにする"""
    stack = agent.stack()
    streams = agent.streams
    observations = traj.observations()
    latent = stack.initial_latent(observations[0], streams.wm)
    contexts, chunks = [], []
    for t in range(len(traj)):
        context = obs_context(observations[max(t - 1, 0)], observations[t])
        planned = plan(context, latent, stack.policy, stack.wm, stack.rm, stack.critic, stack.planner,
                       stack.gamma, streams.policy, streams.planner, streams.wm)
        contexts.append(context)
        chunks.append(planned.chunk)
        latent = stack.advance_latent(latent, traj.actions[t], observations[t + 1], streams.wm)
    return ChunkDataset(np.stack(contexts).astype(np.float32), np.stack(chunks).astype(np.float32))


def expert_iteration(agent: SearchAgent, demos: DemoSet, buffer: ReplayBuffer,
                     schedule: PhaseSchedule) -> float:
    """最新の軌跡をプランナーでラベル付けし直し、デモと半々で蒸留する。平均損失を返す"""
    latest = buffer.latest(schedule.relabel_trajectories)
    if not latest:
        raise ValueError("expert iteration needs trajectories in the replay buffer")
    relabeled = ChunkDataset.concat([relabel_trajectory(agent, traj) for traj in latest])
    demo_data = chunk_dataset(demos.trajectories, agent.config.policy.chunk)
    losses = bc_fit_from_settings(agent.policy, relabeled, schedule.distill_iterations, agent.streams.batch,
                                  agent.config.policy, warmup=False, mix_with=demo_data)
    logger.info("expert iteration: relabeled %d trajectories (%d chunks), distill loss %.4f",
                len(latest), len(relabeled), float(np.mean(losses)))
    return float(np.mean(losses))


def online_round(agent: SearchAgent, demos: DemoSet, buffer: ReplayBuffer, schedule: PhaseSchedule,
                 round_index: int) -> PhaseReport:
    """プランナー付きでロールアウトを集め、モデルを更新し、周期的に蒸留する"""
    steps = schedule.round_steps(round_index)
    episodes = collect(agent, buffer, steps, use_planner=True, exploration_std=schedule.exploration_std)
    report = PhaseReport('online', round_index, steps, episodes=episodes)
    best_q = [q for e in episodes for q in e.best_q]
    mu_norms = [m for e in episodes for m in e.mu_norms]
    if best_q:
        report.planner_best_q = float(np.nanmean(best_q))
        report.planner_mu_norm = float(np.mean(mu_norms))
    report.diagnostics = train_models(agent, demos, buffer, schedule.round_grad_steps)
    if agent.config.ablation.expert_iteration and schedule.distills_on(round_index):
        report.diagnostics['bc_loss'] = expert_iteration(agent, demos, buffer, schedule)
        report.distilled = True
    return report


# ---- ラウンド境界のチェックポイント ----

def save_run_state(directory, agent: SearchAgent, buffer: ReplayBuffer, round_index: int, env_steps: int,
                   config_hash: str) -> Path:
    directory = Path(directory) / f"round_{round_index:03d}"
    agent.save(directory)
    task = agent.task
    buffer.save(directory / 'replay.csdm', task.name, task.d_o, task.d_a, task.horizon)
    state = {
        'round': round_index,
        'env_steps': env_steps,
        'config_hash': config_hash,
        'replay_ids': [t.traj_id for t in buffer.trajectories],
        'replay_next_id': buffer.next_id,
        'replay_capacity': buffer.capacity,
        'rng': agent.streams.get_state(),
    }
    ensure_data_directory(str(directory / 'state.json'))
    with open(directory / 'state.json', 'w', encoding='utf-8') as f:
        json.dump(state, f, indent=2)
    logger.info("checkpoint saved: %s", directory)
    return directory


def latest_checkpoint(directory) -> Optional[Path]:
    rounds = sorted(Path(directory).glob('round_*/state.json'))
    return rounds[-1].parent if rounds else None


def load_run_state(directory, agent: SearchAgent, config_hash: Optional[str] = None):
    """save_run_state の逆。(buffer, round_index, env_steps) を返す"""
    directory = Path(directory)
    state_path = directory / 'state.json'
    if not state_path.exists():
        found = latest_checkpoint(directory)
        if found is None:
            raise CheckpointError(f"no run checkpoint in {directory}")
        directory, state_path = found, found / 'state.json'
    with open(state_path, 'r', encoding='utf-8') as f:
        state = json.load(f)
    if config_hash is not None and state['config_hash'] != config_hash:
        raise CheckpointError(f"{directory}: checkpoint was written by a different config")
    agent.load(directory)
    agent.streams.set_state(state['rng'])
    buffer = ReplayBuffer.load(directory / 'replay.csdm', state['replay_capacity'],
                               state['replay_ids'], state['replay_next_id'])
    return buffer, int(state['round']), int(state['env_steps'])


# ---- 全体ループ ----

RowCallback = Callable[[PhaseReport, Optional[EvalResult]], None]


def _guard(phase: str, round_index: int, agent: SearchAgent, fn, *args):
    try:
        return fn(*args)
    except (ChunksearchError, FloatingPointError, ValueError) as e:
        if isinstance(e, PhaseError):
            raise
        raise PhaseError(phase, round_index, agent.wm_steps, e) from e


def evaluate_agent(agent: SearchAgent, use_planner: bool = True) -> EvalResult:
    cfg = agent.config
    planner = cfg.planner.model_copy(update={'mode': cfg.evaluation.planner_mode})
    return evaluate(agent.stack(planner), agent.task, cfg.evaluation.episodes, cfg.evaluation.seed_offset,
                    use_planner=use_planner, record_rm=cfg.evaluation.rm_traces,
                    process_noise_std=cfg.task.process_noise_std)


def train_agent(agent: SearchAgent, demos: DemoSet, schedule: PhaseSchedule, on_round: RowCallback,
                checkpoint_dir=None, config_hash: str = '', resume_from=None) -> ReplayBuffer:
    """ウォームスタートとオンラインラウンドを実行し、各ラウンド境界で on_round を呼ぶ"""
    cfg = agent.config
    start_round = 1
    env_steps = 0
    if resume_from is not None:
        buffer, last_round, env_steps = load_run_state(resume_from, agent, config_hash)
        start_round = last_round + 1
        logger.info("resumed from round %d (%d env steps)", last_round, env_steps)
    else:
        buffer = ReplayBuffer(cfg.schedule.replay_capacity)
        report = _guard('warm_start', 0, agent, warm_start, agent, demos, buffer, schedule)
        env_steps = report.env_steps
        result = _guard('evaluation', 0, agent, evaluate_agent, agent) if len(buffer) else None
        on_round(report, result)
        if checkpoint_dir is not None:
            save_run_state(checkpoint_dir, agent, buffer, 0, env_steps, config_hash)

    for round_index in range(start_round, schedule.num_rounds + 1):
        report = _guard('online', round_index, agent, online_round, agent, demos, buffer, schedule, round_index)
        env_steps += report.env_steps
        report.env_steps = env_steps
        result = None
        if round_index % cfg.evaluation.every_rounds == 0 or round_index == schedule.num_rounds:
            result = _guard('evaluation', round_index, agent, evaluate_agent, agent)
        on_round(report, result)
        if checkpoint_dir is not None and (round_index % cfg.run.checkpoint_every == 0
                                           or round_index == schedule.num_rounds):
            save_run_state(checkpoint_dir, agent, buffer, round_index, env_steps, config_hash)

    return buffer


def posthoc_distillation(agent: SearchAgent, demos: DemoSet, buffer: ReplayBuffer, schedule: PhaseSchedule,
                         on_round: RowCallback) -> Optional[EvalResult]:
    """学習後に一度だけプランナー出力をベース方策へ蒸留し、探索なしで評価する"""
    if not len(buffer):
        return None
    last = schedule.num_rounds + 1
    loss = _guard('posthoc', last, agent, expert_iteration, agent, demos, buffer, schedule)
    report = PhaseReport('posthoc', last, schedule.total_steps, {'bc_loss': loss}, distilled=True)
    result = _guard('evaluation', last, agent, evaluate_agent, agent, False)
    on_round(report, result)
    return result
