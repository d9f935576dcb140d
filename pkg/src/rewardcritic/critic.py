"""
クリティックのアンサンブル（低速EMAコピー付き）
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from src.tensorcore import tape as T
from src.tensorcore.layers import MLPSpec, mlp_forward
from src.tensorcore.optim import ParamStore, adam_step
from src.tensorcore.tape import Tape, Tensor, TensorLike
from src.utils.common import ShapeError

logger = logging.getLogger(__name__)


class CriticEnsemble:
    """独立に初期化した M 個の価値ネットワーク。低速コピーは ParamStore の EMA シャドウ"""

    def __init__(self, dz: int, rng: np.random.Generator, members: int = 5, units: int = 64,
                 hidden_layers: int = 2, c_unc: float = 1.0):
        if members < 2:
            raise ValueError(f"critic ensemble needs at least 2 members: {members}")
        self.dz = dz
        self.c_unc = c_unc
        self.specs = [MLPSpec(f'critic{i}', (dz,) + (units,) * hidden_layers + (1,)) for i in range(members)]
        params = {}
        for spec in self.specs:
            params.update(spec.init(rng))
        self.store = ParamStore(params, name='critic', with_ema=True)

    @classmethod
    def from_settings(cls, settings, dz: int, rng: np.random.Generator) -> 'CriticEnsemble':
        return cls(dz, rng, members=settings.members, units=settings.units,
                   hidden_layers=settings.hidden_layers, c_unc=settings.c_unc)

    @property
    def members(self) -> int:
        return len(self.specs)

    def member_values(self, z: TensorLike, params=None) -> Tensor:
        """各メンバーの出力 (M, ...)"""
        params = self.store.params if params is None else params
        z = T.as_tensor(z)
        if z.shape[-1] != self.dz:
            raise ShapeError(f"critic expects latent dim {self.dz}, got {z.shape[-1]}")
        lead = z.shape[:-1]
        flat = T.reshape(z, (-1, self.dz))
        outs = [T.reshape(mlp_forward(params, spec, flat), lead) for spec in self.specs]
        return T.stack(outs, axis=0)

    def slow_values(self, z) -> np.ndarray:
        return self.member_values(np.asarray(z), self.store.ema).value

    def mean_value(self, z) -> np.ndarray:
        return self.member_values(np.asarray(z)).value.mean(axis=0)

    def update_slow(self, decay: float) -> None:
        self.store.update_ema(decay)


def ensemble_value(ensemble: CriticEnsemble, z, rng: Optional[np.random.Generator],
                   pair: Optional[Sequence[int]] = None) -> np.ndarray:
    """ランダムな2メンバーの平均 − c_unc · 全メンバーの標準偏差（母標準偏差）"""
    values = ensemble.member_values(np.asarray(z)).value.astype(np.float64)
    if pair is None:
        pair = rng.choice(ensemble.members, 2, replace=False)
    i, j = int(pair[0]), int(pair[1])
    if i == j:
        raise ValueError(f"critic pair must be two distinct members: {pair}")
    return 0.5 * (values[i] + values[j]) - ensemble.c_unc * values.std(axis=0)


@dataclass
class CriticLossOutput:
    loss: Tensor
    mse: float
    slow_reg: float

    @property
    def diagnostics(self) -> Dict[str, float]:
        return {'critic_mse': self.mse}


def critic_loss(ensemble: CriticEnsemble, latents, targets, params=None, slow_reg: float = 1.0,
                weights: Optional[np.ndarray] = None) -> CriticLossOutput:
    """Σ_i [ mean (V_i − target)² + slow_reg · mean (V_i − V_slow_i)² ]。target は定数"""
    latents = np.asarray(latents)
    targets = np.asarray(targets)
    if latents.shape[:-1] != targets.shape:
        raise ShapeError(f"latents {latents.shape} do not match targets {targets.shape}")
    values = ensemble.member_values(latents, params)
    dtype = values.dtype
    slow = ensemble.slow_values(latents).astype(dtype)
    if weights is None:
        weights = np.ones(targets.shape)
    weights = np.asarray(weights, dtype=np.float64)
    weights = (weights / max(weights.sum(), 1e-12)).astype(dtype)

    mse = T.reduce_sum(T.mul(T.square(T.sub(values, targets.astype(dtype))), weights))
    reg = T.reduce_sum(T.mul(T.square(T.sub(values, slow)), weights))
    loss = T.add(mse, T.mul(reg, slow_reg))
    return CriticLossOutput(loss, float(mse.value) / ensemble.members, float(reg.value) / ensemble.members)


def critic_train_step(ensemble: CriticEnsemble, latents, targets, settings,
                      weights: Optional[np.ndarray] = None) -> CriticLossOutput:
    with Tape() as tape:
        params = tape.watch(ensemble.store.params)
        out = critic_loss(ensemble, latents, targets, params, settings.slow_reg, weights)
    grads = tape.gradient(out.loss, params)
    adam_step(ensemble.store, grads, lr=settings.lr, eps=settings.eps, clip_norm=settings.clip_norm)
    ensemble.update_slow(settings.ema_decay)
    return out
