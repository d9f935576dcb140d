"""
学習対象コンポーネント一式（ベース方策・世界モデル・報酬モデル・クリティック）と更新処理
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from src.chunkpolicy.diffusion import DiffusionPolicy
from src.chunkpolicy.training import bc_fit_from_settings, chunk_dataset
from src.envkit.demos import DemoSet
from src.envkit.tasks import TaskSpec
from src.latentwm.rssm import WorldModel
from src.latentwm.training import SubsequenceBatch, WMLossOutput, wm_train_step
from src.orchestrator.replay import ReplayBuffer, hybrid_sample
from src.residualplanner.mpc import SearchStack
from src.rewardcritic.critic import CriticEnsemble, CriticLossOutput, critic_train_step
from src.rewardcritic.returns import lambda_returns
from src.rewardcritic.reward_model import RewardModel, rm_score, rm_train_step, separation_stats
from src.tensorcore.checkpoint import load_store, save_store
from src.utils.common import CheckpointError, RngStreams, ensure_data_directory

logger = logging.getLogger(__name__)

COMPONENTS = ('policy', 'world_model', 'reward_model', 'critic')


class SearchAgent:
    """config と seed から全コンポーネントを初期化する"""

    def __init__(self, config, task: TaskSpec, seed: int):
        self.config = config
        self.task = task
        self.seed = seed
        self.streams = RngStreams(seed)
        init_rng = np.random.default_rng([seed, 1])
        self.policy = DiffusionPolicy.from_settings(config.policy, task.d_o, task.d_a, init_rng)
        self.wm = WorldModel.from_settings(config.world_model, task.d_o, task.d_a, init_rng)
        self.rm = RewardModel.from_settings(config.reward_model, self.wm.dz, init_rng)
        self.critic = CriticEnsemble.from_settings(config.critic, self.wm.dz, init_rng)
        self.wm_steps = 0
        self.rm_updates = 0

    def stack(self, planner=None) -> SearchStack:
        return SearchStack(self.policy, self.wm, self.rm, self.critic,
                           planner if planner is not None else self.config.planner,
                           self.config.critic.gamma, self.config.policy.blend_decay)

    def _component(self, component: str):
        return {'policy': self.policy, 'world_model': self.wm,
                'reward_model': self.rm, 'critic': self.critic}[component]

    def _store(self, component: str):
        return self._component(component).store

    # ---- ベース方策 ----

    def pretrain_policy(self, demos: DemoSet, iterations: Optional[int] = None) -> float:
        """デモで拡散ポリシーを事前学習し、最後の100反復の平均損失を返す"""
        dataset = chunk_dataset(demos.trajectories, self.config.policy.chunk)
        iterations = iterations or self.config.policy.pretrain_iterations
        losses = bc_fit_from_settings(self.policy, dataset, iterations, self.streams.batch, self.config.policy)
        return float(np.mean(losses[-100:]))

    # ---- 世界モデル・報酬モデル・クリティック ----

    def critic_targets(self, wm_out: WMLossOutput, batch: SubsequenceBatch):
        """窓の先頭の事後潜在から記録行動で想像し、λ-リターンを作る"""
        settings = self.config.critic
        start = wm_out.posteriors[0].detach()
        actions = batch.prev_actions[:, 1:]
        imagined, conts = self.wm.imagine(start, actions, self.streams.wm)
        latents = np.concatenate([start.z.value[:, None], imagined], axis=1)
        rewards = rm_score(self.rm, latents[:, :-1])
        values = self.critic.mean_value(latents)
        # 継続確率が0.5を下回ったら以降の割引をゼロにする
        alive = np.cumprod(conts >= 0.5, axis=1).astype(np.float64)
        targets = lambda_returns(rewards, values, settings.gamma, settings.lam, continuations=alive)
        alive_before = np.concatenate([np.ones((len(alive), 1)), alive[:, :-1]], axis=1)
        weights = batch.mask[:, 1:] * alive_before
        return latents[:, :-1], targets.astype(np.float32), weights

    def rm_step(self, batch: SubsequenceBatch, latents: np.ndarray):
        valid = batch.mask > 0
        expert = latents[batch.is_demo][valid[batch.is_demo]]
        learner = latents[~batch.is_demo][valid[~batch.is_demo]]
        out = rm_train_step(self.rm, learner, expert, self.streams.batch, self.config.reward_model)
        self.rm_updates += 1
        return out

    def train_models_step(self, demos: DemoSet, buffer: ReplayBuffer) -> Dict[str, float]:
        """世界モデルとクリティックを1回更新し、規定の間隔で報酬モデルも更新する"""
        cfg = self.config
        batch = hybrid_sample(demos, buffer, cfg.world_model.batch_size, cfg.world_model.batch_length,
                              self.streams.batch)
        wm_out = wm_train_step(self.wm, batch, self.streams.wm, cfg.world_model, hybrid=cfg.ablation.hybrid_wm)
        self.wm_steps += 1
        diagnostics = dict(wm_out.diagnostics)
        latents = wm_out.posterior_latents()

        critic_latents, targets, weights = self.critic_targets(wm_out, batch)
        if weights.sum() > 0:
            critic_out: CriticLossOutput = critic_train_step(self.critic, critic_latents, targets,
                                                             cfg.critic, weights)
            diagnostics.update(critic_out.diagnostics)

        if self.wm_steps % cfg.schedule.rm_every == 0:
            diagnostics.update(self.rm_step(batch, latents).diagnostics)
        return diagnostics

    def demo_latents(self, demos: DemoSet) -> np.ndarray:
        """デモ軌跡を事後フィルタリングした潜在（全ステップ）"""
        rng = np.random.default_rng([self.seed, 2])
        return np.concatenate([self.wm.filter_latents(*t.sequence_arrays()[:2], rng) for t in demos])

    def rm_separation(self, demos: DemoSet, failed) -> Optional[Dict[str, float]]:
        """エキスパート潜在と失敗ロールアウト潜在の報酬分離度"""
        failed = [t for t in failed if not t.success]
        if not failed or len(demos) == 0:
            return None
        rng = np.random.default_rng([self.seed, 3])
        learner = np.concatenate([self.wm.filter_latents(*t.sequence_arrays()[:2], rng) for t in failed])
        return separation_stats(self.rm, self.demo_latents(demos), learner)

    # ---- チェックポイント ----

    def save(self, directory) -> None:
        directory = Path(directory)
        for component in COMPONENTS:
            save_store(directory / component, self._store(component))
        counters = {'wm_steps': self.wm_steps, 'rm_updates': self.rm_updates, 'seed': self.seed,
                    'task': self.task.name}
        ensure_data_directory(str(directory / 'agent.json'))
        with open(directory / 'agent.json', 'w', encoding='utf-8') as f:
            json.dump(counters, f, indent=2)

    def load(self, directory, components=COMPONENTS) -> None:
        directory = Path(directory)
        for component in components:
            stored = load_store(directory / component)
            current = self._store(component)
            if stored.shapes != current.shapes:
                raise CheckpointError(f"{directory / component}: parameter shapes do not match the config")
            self._component(component).store = stored
        counters_path = directory / 'agent.json'
        if counters_path.exists():
            with open(counters_path, 'r', encoding='utf-8') as f:
                counters = json.load(f)
            self.wm_steps = counters.get('wm_steps', 0)
            self.rm_updates = counters.get('rm_updates', 0)
