"""
潜在状態上の識別器型報酬モデル（モーメントマッチング損失 + 勾配ペナルティ）
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, roc_auc_score, roc_curve

from src.tensorcore import tape as T
from src.tensorcore.layers import MLPSpec, mlp_forward, mlp_input_gradient
from src.tensorcore.optim import ParamStore, adam_step
from src.tensorcore.tape import Tape, Tensor, TensorLike
from src.utils.common import ShapeError

logger = logging.getLogger(__name__)


class RewardModel:
    """z → スカラー報酬（大きいほどエキスパートらしい）"""

    def __init__(self, dz: int, rng: np.random.Generator, units: int = 64, hidden_layers: int = 2):
        self.dz = dz
        self.spec = MLPSpec('rm', (dz,) + (units,) * hidden_layers + (1,))
        self.store = ParamStore(self.spec.init(rng), name='reward_model')

    @classmethod
    def from_settings(cls, settings, dz: int, rng: np.random.Generator) -> 'RewardModel':
        return cls(dz, rng, units=settings.units, hidden_layers=settings.hidden_layers)

    def score(self, z: TensorLike, params=None) -> Tensor:
        params = self.store.params if params is None else params
        z = T.as_tensor(z)
        if z.shape[-1] != self.dz:
            raise ShapeError(f"reward model expects latent dim {self.dz}, got {z.shape[-1]}")
        lead = z.shape[:-1]
        out = mlp_forward(params, self.spec, T.reshape(z, (-1, self.dz)))
        return T.reshape(out, lead)


def rm_score(rm: RewardModel, z) -> np.ndarray:
    """報酬スコア（テープに記録しない）"""
    return rm.score(np.asarray(z)).value


def moment_term(rm: RewardModel, learner_latents, expert_latents, params=None) -> Tensor:
    """mean RM(learner) − mean RM(expert)"""
    if len(learner_latents) == 0 or len(expert_latents) == 0:
        raise ValueError("moment term needs non-empty learner and expert latent sets")
    return T.sub(T.reduce_mean(rm.score(learner_latents, params)), T.reduce_mean(rm.score(expert_latents, params)))


def matched_pairs(learner_latents: np.ndarray, expert_latents: np.ndarray,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """同数のミニバッチにそろえる（多い方を非復元抽出）"""
    n = min(len(learner_latents), len(expert_latents))

    def subset(x):
        if len(x) == n:
            return np.asarray(x)
        return np.asarray(x)[np.sort(rng.choice(len(x), n, replace=False))]

    return subset(learner_latents), subset(expert_latents)


def gradient_penalty(rm: RewardModel, learner_latents, expert_latents, rng: np.random.Generator,
                     params=None, coef: float = 10.0) -> Tensor:
    """coef · mean((‖∇RM(x̂)‖ − 1)²)、x̂ = α·expert + (1−α)·learner（αはサンプルごとに一様）"""
    learner, expert = matched_pairs(learner_latents, expert_latents, rng)
    alpha = rng.random((len(learner), 1)).astype(learner.dtype)
    x_hat = alpha * expert + (1.0 - alpha) * learner
    params = rm.store.params if params is None else params
    grad = mlp_input_gradient(params, rm.spec, x_hat)
    norm = T.sqrt(T.add(T.reduce_sum(T.square(grad), axis=-1), 1e-12))
    return T.mul(T.reduce_mean(T.square(T.add(norm, -1.0))), coef)


@dataclass
class RMLossOutput:
    loss: Tensor
    moment: float
    penalty: float

    @property
    def diagnostics(self) -> Dict[str, float]:
        return {'rm_moment': self.moment, 'rm_penalty': self.penalty}


def rm_loss(rm: RewardModel, learner_latents, expert_latents, rng: np.random.Generator,
            params=None, gp_coef: float = 10.0) -> RMLossOutput:
    moment = moment_term(rm, learner_latents, expert_latents, params)
    penalty = gradient_penalty(rm, learner_latents, expert_latents, rng, params, gp_coef)
    return RMLossOutput(T.add(moment, penalty), float(moment.value), float(penalty.value))


def rm_train_step(rm: RewardModel, learner_latents: np.ndarray, expert_latents: np.ndarray,
                  rng: np.random.Generator, settings) -> RMLossOutput:
    """潜在は定数として扱う（世界モデルには勾配を流さない）"""
    learner = np.asarray(learner_latents, dtype=np.float32)
    expert = np.asarray(expert_latents, dtype=np.float32)
    with Tape() as tape:
        params = tape.watch(rm.store.params)
        out = rm_loss(rm, learner, expert, rng, params, settings.gp_coef)
    grads = tape.gradient(out.loss, params)
    adam_step(rm.store, grads, lr=settings.lr, eps=settings.eps, clip_norm=settings.clip_norm)
    return out


def separation_stats(rm: RewardModel, expert_latents: np.ndarray,
                     learner_latents: np.ndarray) -> Dict[str, float]:
    """エキスパート潜在と失敗ロールアウト潜在の分離度（最良しきい値での正解率）"""
    expert_scores = rm_score(rm, expert_latents)
    learner_scores = rm_score(rm, learner_latents)
    labels = np.concatenate([np.ones(len(expert_scores)), np.zeros(len(learner_scores))])
    scores = np.concatenate([expert_scores, learner_scores])
    _, _, thresholds = roc_curve(labels, scores)
    accuracy = max(accuracy_score(labels, scores >= th) for th in thresholds if np.isfinite(th))
    return {
        'expert_mean_score': float(expert_scores.mean()),
        'learner_mean_score': float(learner_scores.mean()),
        'threshold_accuracy': float(accuracy),
        'auc': float(roc_auc_score(labels, scores)),
    }
