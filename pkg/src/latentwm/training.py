"""
世界モデルの学習: 部分系列のサンプリング、損失、更新ステップ
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.envkit.tasks import Trajectory
from src.latentwm.rssm import LatentState, WorldModel
from src.tensorcore import tape as T
from src.tensorcore.layers import categorical_kl
from src.tensorcore.optim import adam_step
from src.tensorcore.tape import Tape, Tensor
from src.utils.common import NonFiniteError

logger = logging.getLogger(__name__)


@dataclass
class SubsequenceBatch:
    obs: np.ndarray            # (B, L, d_o)
    prev_actions: np.ndarray   # (B, L, d_a) 各観測に至った行動（先頭はゼロ）
    cont: np.ndarray           # (B, L)
    mask: np.ndarray           # (B, L) パディングは0
    is_demo: np.ndarray        # (B,) bool
    traj_ids: np.ndarray       # (B,)
    starts: np.ndarray         # (B,) 窓の開始インデックス

    @property
    def batch_size(self) -> int:
        return self.obs.shape[0]

    @property
    def length(self) -> int:
        return self.obs.shape[1]

    @classmethod
    def concat(cls, batches: Sequence['SubsequenceBatch']) -> 'SubsequenceBatch':
        return cls(*(np.concatenate([getattr(b, name) for b in batches], axis=0)
                     for name in ('obs', 'prev_actions', 'cont', 'mask', 'is_demo', 'traj_ids', 'starts')))


def window(traj: Trajectory, start: int, length: int):
    """軌跡の系列配列から長さ length の窓を切り出す（不足分は終端の繰り返しで埋め、マスク0）"""
    obs, prev_actions, cont = traj.sequence_arrays()
    end = min(start + length, len(obs))
    valid = end - start
    mask = np.zeros(length, dtype=np.float32)
    mask[:valid] = 1.0
    pad = length - valid

    def take(arr):
        part = arr[start:end]
        if pad:
            part = np.concatenate([part, np.repeat(part[-1:], pad, axis=0)], axis=0)
        return part

    return take(obs), take(prev_actions), take(cont), mask


def sample_windows(trajectories: Sequence[Trajectory], count: int, length: int,
                   rng: np.random.Generator, is_demo: bool) -> SubsequenceBatch:
    """軌跡を一様に選び、開始位置を有効範囲 [0, L-u] から一様に選ぶ"""
    if not trajectories:
        raise ValueError("cannot sample windows from an empty source")
    rows = []
    for _ in range(count):
        traj = trajectories[int(rng.integers(len(trajectories)))]
        seq_len = len(traj) + 1
        start = int(rng.integers(0, max(seq_len - length, 0) + 1))
        rows.append((traj.traj_id, start) + window(traj, start, length))
    return SubsequenceBatch(
        obs=np.stack([r[2] for r in rows]).astype(np.float32),
        prev_actions=np.stack([r[3] for r in rows]).astype(np.float32),
        cont=np.stack([r[4] for r in rows]).astype(np.float32),
        mask=np.stack([r[5] for r in rows]),
        is_demo=np.full(count, is_demo),
        traj_ids=np.array([r[0] for r in rows], dtype=np.int64),
        starts=np.array([r[1] for r in rows], dtype=np.int64),
    )


def hybrid_batch(demo_trajectories: Sequence[Trajectory], replay_trajectories: Sequence[Trajectory],
                 batch_size: int, length: int, rng: np.random.Generator) -> SubsequenceBatch:
    """半分をデモ、半分をリプレイから取ったバッチ"""
    n_demo = batch_size // 2
    demo = sample_windows(demo_trajectories, n_demo, length, rng, is_demo=True)
    replay = sample_windows(replay_trajectories, batch_size - n_demo, length, rng, is_demo=False)
    return SubsequenceBatch.concat([demo, replay])


@dataclass
class WMLossOutput:
    loss: Tensor
    pred: float
    dyn: float
    rep: float
    posteriors: List[LatentState] = field(repr=False, default_factory=list)

    @property
    def diagnostics(self) -> Dict[str, float]:
        return {'wm_loss': float(self.loss.value), 'wm_pred': self.pred, 'wm_dyn': self.dyn, 'wm_rep': self.rep}

    def posterior_latents(self) -> np.ndarray:
        """(B, L, dz)"""
        return np.stack([p.z.value for p in self.posteriors], axis=1)


def wm_loss(wm: WorldModel, batch: SubsequenceBatch, rng: Optional[np.random.Generator], params=None,
            beta_pred: float = 1.0, beta_dyn: float = 0.1, beta_rep: float = 0.5,
            free_nats: float = 1.0, recon_scale: float = 1.0, row_weights: Optional[np.ndarray] = None,
            stochastic: bool = True) -> WMLossOutput:
    """β_pred·ℓ_pred + β_dyn·ℓ_dyn + β_rep·ℓ_rep

    各項は時間方向に和、バッチ方向に（row_weights による重み付き）平均。
    """
    posteriors, prior_logits = wm.observe_sequence(batch.obs, batch.prev_actions, rng, params, stochastic)
    dtype = posteriors[0].h.dtype
    z = T.stack([p.z for p in posteriors], axis=1)
    obs_mean, cont_logit = wm.decode_logits(z, params)

    obs_target = batch.obs.astype(dtype)
    cont_target = batch.cont.astype(dtype)
    recon = T.mul(T.reduce_sum(T.square(T.sub(obs_mean, obs_target)), axis=-1), 0.5 * recon_scale)
    bce = T.sub(T.softplus(cont_logit), T.mul(cont_logit, cont_target))
    pred = T.add(recon, bce)

    post_logits = T.stack([p.logits for p in posteriors], axis=1)
    prior = T.stack(prior_logits, axis=1)
    dyn = T.maximum(categorical_kl(T.stop_gradient(post_logits), prior), free_nats)
    rep = T.maximum(categorical_kl(post_logits, T.stop_gradient(prior)), free_nats)

    weights = np.ones(batch.batch_size) if row_weights is None else np.asarray(row_weights, dtype=np.float64)
    total_weight = weights.sum()
    if total_weight <= 0:
        raise ValueError("wm_loss: every batch row has zero weight")
    step_weights = (batch.mask * weights[:, None] / total_weight).astype(dtype)

    def aggregate(term: Tensor) -> Tensor:
        return T.reduce_sum(T.mul(term, step_weights))

    pred_term, dyn_term, rep_term = aggregate(pred), aggregate(dyn), aggregate(rep)
    loss = T.add(T.add(T.mul(pred_term, beta_pred), T.mul(dyn_term, beta_dyn)), T.mul(rep_term, beta_rep))
    if not np.isfinite(loss.value):
        raise NonFiniteError(
            f"world model loss is not finite (pred={pred_term.value}, dyn={dyn_term.value}, rep={rep_term.value})")
    return WMLossOutput(loss, float(pred_term.value), float(dyn_term.value), float(rep_term.value), posteriors)


def wm_loss_from_settings(wm: WorldModel, batch: SubsequenceBatch, rng, settings, params=None,
                          hybrid: bool = True, stochastic: bool = True) -> WMLossOutput:
    """設定値で wm_loss を計算。hybrid=False ならデモ行を損失から外す"""
    row_weights = None if hybrid else (~batch.is_demo).astype(np.float64)
    return wm_loss(wm, batch, rng, params, beta_pred=settings.beta_pred, beta_dyn=settings.beta_dyn,
                   beta_rep=settings.beta_rep, free_nats=settings.free_nats, recon_scale=settings.recon_scale,
                   row_weights=row_weights, stochastic=stochastic)


def wm_train_step(wm: WorldModel, batch: SubsequenceBatch, rng: np.random.Generator, settings,
                  hybrid: bool = True) -> WMLossOutput:
    """1回の勾配更新。RMの損失は世界モデルに流さない（呼び出し側で潜在を切り離す）"""
    with Tape() as tape:
        params = tape.watch(wm.store.params)
        out = wm_loss_from_settings(wm, batch, rng, settings, params, hybrid=hybrid)
    grads = tape.gradient(out.loss, params)
    adam_step(wm.store, grads, lr=settings.lr, eps=settings.eps, clip_norm=settings.clip_norm)
    logger.debug("wm step %d: loss %.4f pred %.4f dyn %.4f rep %.4f",
                 wm.store.step, float(out.loss.value), out.pred, out.dyn, out.rep)
    return out
