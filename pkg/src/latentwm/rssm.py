"""
再帰状態空間モデル（RSSM）による潜在世界モデル
決定的状態 h（GRU）とグループ化カテゴリカル状態 s の組 z = [h, s] で観測列を表現する
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.tensorcore import tape as T
from src.tensorcore.layers import (GRUSpec, MLPSpec, categorical_straight_through, gru_step,
                                   mlp_forward)
from src.tensorcore.optim import ParamStore
from src.tensorcore.tape import Tensor, TensorLike
from src.utils.common import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class LatentState:
    h: Tensor        # (B, deter)
    s: Tensor        # (B, S, C) ワンホット（stochastic=False なら確率）
    logits: Tensor   # (B, S, C)

    @property
    def batch_size(self) -> int:
        return self.h.shape[0]

    @property
    def s_flat(self) -> Tensor:
        return T.reshape(self.s, (self.s.shape[0], -1))

    @property
    def z(self) -> Tensor:
        return T.concat([self.h, self.s_flat], axis=-1)

    def detach(self) -> 'LatentState':
        return LatentState(T.stop_gradient(self.h), T.stop_gradient(self.s), T.stop_gradient(self.logits))

    def repeat(self, n: int) -> 'LatentState':
        """バッチ1の状態をn個に複製"""
        if self.batch_size != 1:
            raise ShapeError(f"repeat needs batch size 1, got {self.batch_size}")
        return LatentState(
            Tensor(np.repeat(self.h.value, n, axis=0)),
            Tensor(np.repeat(self.s.value, n, axis=0)),
            Tensor(np.repeat(self.logits.value, n, axis=0)),
        )


class WorldModel:
    """エンコーダ・ダイナミクス・デコーダ・継続ヘッドからなる世界モデル"""

    def __init__(self, d_o: int, d_a: int, rng: np.random.Generator, deter: int = 64,
                 groups: int = 8, classes: int = 8, units: int = 128,
                 encoder_layers: int = 2, decoder_layers: int = 2):
        self.d_o, self.d_a = d_o, d_a
        self.deter, self.groups, self.classes = deter, groups, classes
        self.stoch = groups * classes
        self.dz = deter + self.stoch
        self.units = units

        self.encoder = MLPSpec('enc', (d_o,) + (units,) * encoder_layers)
        self.img_in = MLPSpec('img_in', (self.stoch + d_a, units))
        self.gru = GRUSpec('gru', units, deter)
        self.prior_head = MLPSpec('prior', (deter, units, self.stoch))
        self.post_head = MLPSpec('post', (deter + units, units, self.stoch))
        self.decoder = MLPSpec('dec', (self.dz,) + (units,) * decoder_layers + (d_o,))
        self.cont_head = MLPSpec('cont', (self.dz, units, 1))

        params = {}
        for spec in (self.encoder, self.img_in, self.gru, self.prior_head, self.post_head,
                     self.decoder, self.cont_head):
            params.update(spec.init(rng))
        self.store = ParamStore(params, name='world_model')

    @classmethod
    def from_settings(cls, settings, d_o: int, d_a: int, rng: np.random.Generator) -> 'WorldModel':
        return cls(d_o, d_a, rng, deter=settings.deter, groups=settings.groups, classes=settings.classes,
                   units=settings.units, encoder_layers=settings.encoder_layers,
                   decoder_layers=settings.decoder_layers)

    def _params(self, params: Optional[Mapping[str, TensorLike]]) -> Mapping[str, TensorLike]:
        return self.store.params if params is None else params

    # ---- 状態 ----

    def initial_state(self, batch_size: int = 1, dtype=np.float32) -> LatentState:
        """ゼロ状態（最初の観測の前）"""
        return LatentState(
            Tensor(np.zeros((batch_size, self.deter), dtype=dtype)),
            Tensor(np.zeros((batch_size, self.groups, self.classes), dtype=dtype)),
            Tensor(np.zeros((batch_size, self.groups, self.classes), dtype=dtype)),
        )

    def _check_action(self, a_prev: TensorLike, dtype=None) -> Tensor:
        if not isinstance(a_prev, Tensor):
            a_prev = Tensor(np.asarray(a_prev, dtype=dtype))
        if a_prev.ndim == 1:
            a_prev = T.reshape(a_prev, (1, -1))
        if a_prev.shape[-1] != self.d_a:
            raise ShapeError(f"action dim {a_prev.shape[-1]} != {self.d_a}")
        return a_prev

    def _recurrent(self, params, state: LatentState, a_prev: Tensor) -> Tensor:
        x = T.silu(mlp_forward(params, self.img_in, T.concat([state.s_flat, a_prev], axis=-1)))
        return gru_step(params, self.gru, state.h, x)

    def _code(self, logits: Tensor, rng, stochastic: bool) -> Tuple[Tensor, Tensor]:
        logits = T.reshape(logits, (logits.shape[0], self.groups, self.classes))
        code = categorical_straight_through(logits, rng, stochastic)
        return logits, code.value

    def embed(self, obs: TensorLike, params=None) -> Tensor:
        obs = T.as_tensor(obs)
        if obs.shape[-1] != self.d_o:
            raise ShapeError(f"observation dim {obs.shape[-1]} != {self.d_o}")
        params = self._params(params)
        lead = obs.shape[:-1]
        flat = T.reshape(obs, (-1, self.d_o))
        out = T.silu(mlp_forward(params, self.encoder, flat))
        return T.reshape(out, lead + (self.units,))

    def observe_step(self, state: LatentState, a_prev: TensorLike, embedded: Tensor,
                     rng: Optional[np.random.Generator], params=None,
                     stochastic: bool = True) -> Tuple[LatentState, Tensor]:
        """1ステップ分の事後状態と事前ロジットを返す（h は共有）"""
        params = self._params(params)
        a_prev = self._check_action(a_prev, state.h.dtype)
        h = self._recurrent(params, state, a_prev)
        prior_logits = T.reshape(mlp_forward(params, self.prior_head, h),
                                 (h.shape[0], self.groups, self.classes))
        post_logits, s = self._code(mlp_forward(params, self.post_head, T.concat([h, embedded], axis=-1)),
                                    rng, stochastic)
        return LatentState(h, s, post_logits), prior_logits

    def encode(self, state: LatentState, a_prev: TensorLike, obs: TensorLike,
               rng: Optional[np.random.Generator], params=None, stochastic: bool = True) -> LatentState:
        """事後分布: 直前の潜在・行動と現在の観測から次の潜在状態を作る"""
        if not isinstance(obs, Tensor):
            obs = Tensor(np.asarray(obs, dtype=state.h.dtype))
        if obs.ndim == 1:
            obs = T.reshape(obs, (1, -1))
        posterior, _ = self.observe_step(state, a_prev, self.embed(obs, params), rng, params, stochastic)
        return posterior

    def predict_prior(self, state: LatentState, a_prev: TensorLike,
                      rng: Optional[np.random.Generator], params=None, stochastic: bool = True) -> LatentState:
        """事前分布（ダイナミクス）: 観測なしで次の潜在状態を予測"""
        params = self._params(params)
        h = self._recurrent(params, state, self._check_action(a_prev, state.h.dtype))
        logits, s = self._code(mlp_forward(params, self.prior_head, h), rng, stochastic)
        return LatentState(h, s, logits)

    def decode(self, z: TensorLike, params=None) -> Tuple[Tensor, Tensor]:
        """観測の平均と継続確率"""
        obs_mean, cont_logit = self.decode_logits(z, params)
        return obs_mean, T.sigmoid(cont_logit)

    def continuation_prob(self, z: TensorLike, params=None) -> Tensor:
        params = self._params(params)
        z = T.as_tensor(z)
        logit = mlp_forward(params, self.cont_head, T.reshape(z, (-1, self.dz)))
        return T.sigmoid(T.reshape(logit, z.shape[:-1]))

    def decode_logits(self, z: TensorLike, params=None) -> Tuple[Tensor, Tensor]:
        params = self._params(params)
        z = T.as_tensor(z)
        if z.shape[-1] != self.dz:
            raise ShapeError(f"latent dim {z.shape[-1]} != {self.dz}")
        lead = z.shape[:-1]
        flat = T.reshape(z, (-1, self.dz))
        obs_mean = T.reshape(mlp_forward(params, self.decoder, flat), lead + (self.d_o,))
        cont_logit = T.reshape(mlp_forward(params, self.cont_head, flat), lead)
        return obs_mean, cont_logit

    # ---- 想像ロールアウト ----

    def imagine(self, start: LatentState, actions: np.ndarray,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """事前分布を反復して k ステップ想像する

        actions: (N, k, d_a)。start がバッチ1なら N 個に複製する。
        戻り値: 潜在 (N, k, dz) と継続確率 (N, k)
        """
        actions = np.asarray(actions)
        if actions.ndim != 3 or actions.shape[-1] != self.d_a:
            raise ShapeError(f"actions must be (N, k, {self.d_a}), got {actions.shape}")
        n, k = actions.shape[:2]
        if k < 1:
            raise ValueError("imagination horizon must be >= 1")
        state = start.repeat(n) if start.batch_size == 1 and n > 1 else start
        dtype = start.h.dtype
        latents = np.empty((n, k, self.dz), dtype=dtype)
        conts = np.empty((n, k), dtype=dtype)
        for i in range(k):
            state = self.predict_prior(state, actions[:, i], rng)
            z = state.z
            latents[:, i] = z.value
            conts[:, i] = self.continuation_prob(z).value
        return latents, conts

    def rollout_imagine(self, start: LatentState, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.imagine(start, actions, rng)[0]

    # ---- 系列処理 ----

    def observe_sequence(self, obs: TensorLike, prev_actions: TensorLike, rng: Optional[np.random.Generator],
                         params=None, stochastic: bool = True) -> Tuple[List[LatentState], List[Tensor]]:
        """観測列 (B, L, d_o) と直前行動列 (B, L, d_a) から事後状態列と事前ロジット列"""
        obs, prev_actions = T.as_tensor(obs), T.as_tensor(prev_actions)
        if obs.ndim != 3 or prev_actions.ndim != 3 or obs.shape[:2] != prev_actions.shape[:2]:
            raise ShapeError(f"sequence shapes mismatch: obs {obs.shape}, actions {prev_actions.shape}")
        batch, length = obs.shape[:2]
        embedded = self.embed(obs, params)
        state = self.initial_state(batch, dtype=obs.dtype)
        posteriors, prior_logits = [], []
        for t in range(length):
            state, prior = self.observe_step(state, prev_actions[:, t], embedded[:, t], rng, params, stochastic)
            posteriors.append(state)
            prior_logits.append(prior)
        return posteriors, prior_logits

    def filter_latents(self, obs: np.ndarray, prev_actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """1本の系列を事後フィルタリングして潜在列 (L, dz) を返す"""
        posteriors, _ = self.observe_sequence(np.asarray(obs, np.float32)[None],
                                              np.asarray(prev_actions, np.float32)[None], rng)
        return np.stack([p.z.value[0] for p in posteriors])

    def param_count(self) -> Dict[str, int]:
        return {key: value.size for key, value in self.store.items()}
