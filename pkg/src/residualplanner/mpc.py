"""
MPC実行: 事後潜在を更新しながら毎ステップ再計画し、ブレンドした先頭行動を実行する
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from src.chunkpolicy.blending import ActionBlender
from src.chunkpolicy.diffusion import DiffusionPolicy, ddim_sample, obs_context
from src.envkit.tasks import PointMassEnv, Trajectory, Transition
from src.latentwm.rssm import LatentState, WorldModel
from src.residualplanner.mppi import PlanResult, plan, shift_mu
from src.rewardcritic.critic import CriticEnsemble
from src.rewardcritic.reward_model import RewardModel, rm_score
from src.utils.common import RngStreams

logger = logging.getLogger(__name__)


@dataclass
class SearchStack:
    """計画に必要な学習済みコンポーネント一式"""
    policy: DiffusionPolicy
    wm: WorldModel
    rm: RewardModel
    critic: CriticEnsemble
    planner: object        # planner 設定（samples, iterations, top_k, ...）
    gamma: float
    blend_decay: float = 0.1

    def initial_latent(self, obs: np.ndarray, rng: np.random.Generator) -> LatentState:
        """z_0 = encode(ゼロ状態, ゼロ行動, o_0)"""
        return self.wm.encode(self.wm.initial_state(1), np.zeros((1, self.wm.d_a), np.float32), obs, rng)

    def advance_latent(self, latent: LatentState, action: np.ndarray, obs: np.ndarray,
                       rng: np.random.Generator) -> LatentState:
        return self.wm.encode(latent, np.asarray(action, np.float32)[None], obs, rng)


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    best_q: List[float] = field(default_factory=list)     # 各ステップの最終反復の最良 Q̂
    mu_norms: List[float] = field(default_factory=list)
    base_actions: List[np.ndarray] = field(default_factory=list)
    rm_scores: List[float] = field(default_factory=list)
    iteration_seconds: List[float] = field(default_factory=list)
    ddim_seconds: List[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.trajectory)


def mpc_execute(env: PointMassEnv, obs: np.ndarray, stack: SearchStack, streams: RngStreams,
                use_planner: bool = True, exploration_std: float = 0.0, max_steps: Optional[int] = None,
                iterations: Optional[int] = None, samples: Optional[int] = None,
                record_rm: bool = False) -> EpisodeResult:
    """リセット済みの環境で1エピソード実行（max_steps で途中打ち切り可）

    use_planner=False またはJ=0ならベース方策（ブレンドあり）だけで動く。
    """
    planner = stack.planner
    iterations = planner.iterations if iterations is None else iterations
    searching = use_planner and iterations > 0
    track_latent = searching or record_rm
    blender = ActionBlender(stack.policy.chunk, stack.blend_decay)
    base_blender = ActionBlender(stack.policy.chunk, stack.blend_decay)
    latent = stack.initial_latent(obs, streams.wm) if track_latent else None

    result = EpisodeResult(trajectory=None)
    transitions = []
    prev_obs = obs
    mu_init = None
    t = 0
    while True:
        context = obs_context(prev_obs, obs)
        if searching:
            planned: PlanResult = plan(context, latent, stack.policy, stack.wm, stack.rm, stack.critic,
                                       planner, stack.gamma, streams.policy, streams.planner, streams.wm,
                                       iterations, samples, mu_init)
            chunk = planned.chunk
            result.best_q.append(planned.best_q[-1] if planned.best_q else float('nan'))
            result.mu_norms.append(planned.mu_norm)
            result.iteration_seconds.append(planned.iteration_seconds)
            result.ddim_seconds.append(planned.ddim_seconds)
            result.base_actions.append(base_blender.add_and_blend(t, planned.nominal))
            if planner.warm_start_mu and planned.state is not None:
                mu_init = shift_mu(planned.state.mu)
        else:
            started = time.perf_counter()
            chunk = ddim_sample(stack.policy, context, streams.policy)
            result.ddim_seconds.append(time.perf_counter() - started)

        action = blender.add_and_blend(t, chunk)
        if exploration_std > 0:
            action = np.clip(action + streams.explore.normal(0.0, exploration_std, size=action.shape),
                             -1.0, 1.0).astype(np.float32)
        if record_rm:
            result.rm_scores.append(float(rm_score(stack.rm, latent.z.value)[0]))

        step = env.step(action)
        transitions.append(Transition(obs, action, step.continuation, step.success))
        if track_latent:
            latent = stack.advance_latent(latent, action, step.obs, streams.wm)
        prev_obs, obs = obs, step.obs
        t += 1
        if step.continuation == 0 or (max_steps is not None and t >= max_steps):
            break

    result.trajectory = Trajectory.from_transitions(transitions, obs)
    return result
