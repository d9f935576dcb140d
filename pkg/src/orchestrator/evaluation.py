"""
評価ロールアウト（探索ノイズなし、エピソードごとに固定シード）
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from src.envkit.tasks import TaskSpec, Trajectory, make_env
from src.residualplanner.mpc import SearchStack, mpc_execute
from src.utils.common import RngStreams

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    success_rate: float
    episodes: int
    successes: List[bool] = field(default_factory=list)
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)
    rm_traces: List[Dict] = field(default_factory=list, repr=False)
    mean_best_q: float = float('nan')
    mean_mu_norm: float = float('nan')
    mppi_iteration_seconds: float = float('nan')
    ddim_sample_seconds: float = float('nan')


def evaluate(stack: SearchStack, task: TaskSpec, episodes: int, seed_offset: int = 100000,
             use_planner: bool = True, iterations: Optional[int] = None, samples: Optional[int] = None,
             record_rm: bool = False, process_noise_std: Optional[float] = None) -> EvalResult:
    """seed_offset + i の環境シードで episodes 回実行して成功率を返す

    乱数ストリームはエピソードのシードから作り直すので、J=0 とベース方策単体の評価は一致する。
    """
    successes, trajectories, traces = [], [], []
    best_q, mu_norms, iter_secs, ddim_secs = [], [], [], []
    for i in range(episodes):
        seed = seed_offset + i
        env = make_env(task, process_noise_std)
        obs = env.reset(seed)
        result = mpc_execute(env, obs, stack, RngStreams(seed), use_planner=use_planner,
                             iterations=iterations, samples=samples, record_rm=record_rm)
        traj = result.trajectory
        successes.append(traj.success)
        trajectories.append(traj)
        best_q.extend(result.best_q)
        mu_norms.extend(result.mu_norms)
        iter_secs.extend(result.iteration_seconds)
        ddim_secs.extend(result.ddim_seconds)
        for step, score in enumerate(result.rm_scores):
            traces.append({'episode': i, 'step': step, 'rm_score': score, 'success': int(traj.success)})

    def mean_or_nan(values):
        return float(np.mean(values)) if values else float('nan')

    rate = float(np.mean(successes))
    logger.info("evaluation on %s: %d/%d successes (planner=%s)", task.name, sum(successes), episodes,
                use_planner)
    return EvalResult(rate, episodes, successes, trajectories, traces, mean_or_nan(best_q),
                      mean_or_nan(mu_norms), mean_or_nan(iter_secs), mean_or_nan(ddim_secs))
