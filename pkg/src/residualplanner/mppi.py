"""
残差行動計画のMPPI探索
ベース方策の名目チャンクに加える残差 Δ を、世界モデル内の想像ロールアウトで評価して更新する
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from src.chunkpolicy.diffusion import DiffusionPolicy, ddim_sample
from src.latentwm.rssm import LatentState, WorldModel
from src.rewardcritic.critic import CriticEnsemble, ensemble_value
from src.rewardcritic.returns import discounted_return
from src.rewardcritic.reward_model import RewardModel, rm_score
from src.utils.common import PlannerError, ShapeError

logger = logging.getLogger(__name__)

# 候補行動 (N, k, d_a) → Q̂ (N,)
Objective = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PlannerState:
    mu: np.ndarray       # (k, d_a)
    sigma: np.ndarray    # (k, d_a)
    samples: int
    top_k: int
    temperature: float
    sigma_min: float
    iteration: int = 0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.samples:
            raise ValueError(f"need samples >= top_k >= 1, got N={self.samples}, K={self.top_k}")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")

    @classmethod
    def initial(cls, chunk: int, d_a: int, settings, samples: Optional[int] = None,
                mu: Optional[np.ndarray] = None) -> 'PlannerState':
        mu = np.zeros((chunk, d_a)) if mu is None else np.asarray(mu, dtype=np.float64)
        return cls(mu=mu, sigma=np.full((chunk, d_a), float(settings.sigma_init)),
                   samples=int(samples or settings.samples), top_k=int(settings.top_k),
                   temperature=float(settings.temperature), sigma_min=float(settings.sigma_min))


def sample_residuals(state: PlannerState, rng: np.random.Generator, antithetic: bool = True) -> np.ndarray:
    """Δ ~ N(μ, σ)。antithetic なら (+ε, −ε) の対で並べる"""
    shape = (state.samples,) + state.mu.shape
    if antithetic:
        half = rng.standard_normal(((state.samples + 1) // 2,) + state.mu.shape)
        eps = np.empty(shape)
        eps[0::2] = half[:len(eps[0::2])]
        eps[1::2] = -half[:len(eps[1::2])]
    else:
        eps = rng.standard_normal(shape)
    return state.mu + state.sigma * eps


def q_estimate(latents: np.ndarray, rm: RewardModel, ensemble: CriticEnsemble, gamma: float, k: int,
               rng: Optional[np.random.Generator] = None, pair=None) -> np.ndarray:
    """Σ_{h<k} γ^h RM(z_{t+h}) + γ^k V(z_{t+k})。latents: (N, k+1, dz)（先頭は現在の潜在）"""
    latents = np.asarray(latents)
    if latents.ndim != 3 or latents.shape[1] != k + 1:
        raise ShapeError(f"q_estimate needs (N, {k + 1}, dz) latents, got {latents.shape}")
    rewards = rm_score(rm, latents[:, :k])
    values = ensemble_value(ensemble, latents[:, k], rng, pair)
    return discounted_return(rewards, values, gamma)


def mppi_update(state: PlannerState, q_values: np.ndarray, residuals: np.ndarray) -> PlannerState:
    """上位K候補を exp((Q̂−max)/τ) で重み付けして μ, σ を更新"""
    q_values = np.asarray(q_values, dtype=np.float64)
    if len(q_values) != len(residuals):
        raise ShapeError(f"{len(q_values)} scores for {len(residuals)} residuals")
    finite = np.flatnonzero(np.isfinite(q_values))
    if finite.size == 0:
        raise PlannerError("every candidate score is non-finite")
    if finite.size < len(q_values):
        logger.debug("mppi: excluded %d non-finite candidates", len(q_values) - finite.size)
    order = finite[np.argsort(-q_values[finite], kind='stable')]
    top = order[:state.top_k]
    top_q = q_values[top]
    weights = np.exp((top_q - top_q.max()) / state.temperature)
    weights = weights / weights.sum()
    elites = np.asarray(residuals, dtype=np.float64)[top]
    mu = (weights[:, None, None] * elites).sum(axis=0)
    var = (weights[:, None, None] * np.square(elites - mu)).sum(axis=0)
    sigma = np.maximum(np.sqrt(var), state.sigma_min)
    return replace(state, mu=mu, sigma=sigma, iteration=state.iteration + 1)


@dataclass
class PlanResult:
    chunk: np.ndarray                 # 実行する補正済みチャンク (k, d_a)
    nominal: np.ndarray               # ベース方策のチャンク
    state: Optional[PlannerState]
    best_q: List[float] = field(default_factory=list)   # 反復ごとの暫定最良 Q̂
    iteration_seconds: float = 0.0
    ddim_seconds: float = 0.0

    @property
    def mu_norm(self) -> float:
        return float(np.linalg.norm(self.state.mu)) if self.state is not None else 0.0


def world_model_objective(wm: WorldModel, rm: RewardModel, ensemble: CriticEnsemble, latent: LatentState,
                          gamma: float, wm_rng: np.random.Generator,
                          planner_rng: np.random.Generator) -> Objective:
    """候補行動を世界モデル内で想像し Q̂ を返す目的関数"""
    current = latent.z.value

    def objective(actions: np.ndarray) -> np.ndarray:
        n, k = actions.shape[:2]
        imagined = wm.rollout_imagine(latent, actions, wm_rng)
        start = np.repeat(current, n, axis=0)[:, None]
        return q_estimate(np.concatenate([start, imagined], axis=1), rm, ensemble, gamma, k, planner_rng)

    return objective


def search(nominal: np.ndarray, objective: Objective, settings, rng: np.random.Generator,
           iterations: Optional[int] = None, samples: Optional[int] = None,
           mu_init: Optional[np.ndarray] = None) -> PlanResult:
    """名目チャンク周りの残差をJ回更新する。J=0なら名目チャンクをそのまま返す"""
    nominal = np.asarray(nominal, dtype=np.float64)
    iterations = settings.iterations if iterations is None else iterations
    if iterations == 0:
        return PlanResult(nominal.astype(np.float32), nominal.astype(np.float32), None)
    state = PlannerState.initial(nominal.shape[0], nominal.shape[1], settings, samples, mu_init)
    best = -np.inf
    trace = []
    started = time.perf_counter()
    for _ in range(iterations):
        residuals = sample_residuals(state, rng, settings.antithetic)
        actions = np.clip(nominal[None] + residuals, -1.0, 1.0).astype(np.float32)
        q_values = np.asarray(objective(actions), dtype=np.float64)
        if np.any(np.isfinite(q_values)):
            best = max(best, float(np.max(q_values[np.isfinite(q_values)])))
        state = mppi_update(state, q_values, residuals)
        trace.append(best)
    elapsed = (time.perf_counter() - started) / iterations

    residual = state.mu
    if settings.mode == 'sample':
        residual = state.mu + state.sigma * rng.standard_normal(state.mu.shape)
    chunk = np.clip(nominal + residual, -1.0, 1.0).astype(np.float32)
    return PlanResult(chunk, nominal.astype(np.float32), state, trace, iteration_seconds=elapsed)


def plan(context: np.ndarray, latent: LatentState, policy: DiffusionPolicy, wm: WorldModel, rm: RewardModel,
         ensemble: CriticEnsemble, settings, gamma: float, policy_rng: np.random.Generator,
         planner_rng: np.random.Generator, wm_rng: np.random.Generator, iterations: Optional[int] = None,
         samples: Optional[int] = None, mu_init: Optional[np.ndarray] = None) -> PlanResult:
    """ベース方策から名目計画をサンプルし、MPPIで補正した計画を返す"""
    started = time.perf_counter()
    nominal = ddim_sample(policy, context, policy_rng)
    ddim_seconds = time.perf_counter() - started
    objective = world_model_objective(wm, rm, ensemble, latent, gamma, wm_rng, planner_rng)
    result = search(nominal, objective, settings, planner_rng, iterations, samples, mu_init)
    result.ddim_seconds = ddim_seconds
    return result


def shift_mu(mu: np.ndarray) -> np.ndarray:
    """次のMPCステップ用に1ステップずらしてゼロで埋める"""
    shifted = np.zeros_like(mu)
    shifted[:-1] = mu[1:]
    return shifted
