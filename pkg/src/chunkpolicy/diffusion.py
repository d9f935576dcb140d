"""
行動チャンク上の拡散ポリシー（DDPM学習、DDIMサンプリング）
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.tensorcore import tape as T
from src.tensorcore.layers import MLPSpec, mlp_forward
from src.tensorcore.optim import ParamStore
from src.tensorcore.tape import Tensor, TensorLike
from src.utils.common import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int
    betas: np.ndarray
    alphas_cumprod: np.ndarray
    sample_timesteps: np.ndarray   # DDIMで辿る時刻（降順）

    @classmethod
    def cosine(cls, steps: int = 16, sample_steps: int = 4, offset: float = 0.008) -> 'DiffusionSchedule':
        if steps < 1 or not 1 <= sample_steps <= steps:
            raise ValueError(f"invalid diffusion steps: train {steps}, sample {sample_steps}")
        grid = np.arange(steps + 1, dtype=np.float64) / steps
        f = np.cos((grid + offset) / (1.0 + offset) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-5, 0.999)
        alphas_cumprod = np.cumprod(1.0 - betas)
        timesteps = np.unique(np.round(np.linspace(0, steps - 1, sample_steps)).astype(int))[::-1]
        return cls(steps, betas, alphas_cumprod, timesteps)


def timestep_embedding(t: np.ndarray, dim: int = 16) -> np.ndarray:
    """正弦波による拡散時刻の埋め込み (B,) -> (B, dim)"""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def obs_context(prev_obs: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """直前と現在の観測を連結した条件ベクトル"""
    return np.concatenate([np.asarray(prev_obs, np.float32), np.asarray(obs, np.float32)], axis=-1)


class DiffusionPolicy:
    """ノイズ予測MLP: (ノイズ付きチャンク, 時刻埋め込み, 観測コンテキスト) → ノイズ"""

    def __init__(self, d_o: int, d_a: int, rng: np.random.Generator, chunk: int = 8, units: int = 256,
                 hidden_layers: int = 3, diffusion_steps: int = 16, sample_steps: int = 4,
                 embed_dim: int = 16):
        self.d_o, self.d_a, self.chunk = d_o, d_a, chunk
        self.flat_dim = chunk * d_a
        self.embed_dim = embed_dim
        self.schedule = DiffusionSchedule.cosine(diffusion_steps, sample_steps)
        self.spec = MLPSpec('eps', (self.flat_dim + embed_dim + 2 * d_o,) + (units,) * hidden_layers
                            + (self.flat_dim,))
        self.store = ParamStore(self.spec.init(rng), name='policy')

    @classmethod
    def from_settings(cls, settings, d_o: int, d_a: int, rng: np.random.Generator) -> 'DiffusionPolicy':
        return cls(d_o, d_a, rng, chunk=settings.chunk, units=settings.units,
                   hidden_layers=settings.hidden_layers, diffusion_steps=settings.diffusion_steps,
                   sample_steps=settings.sample_steps, embed_dim=settings.embed_dim)

    def predict_noise(self, x_t: TensorLike, t: np.ndarray, context: TensorLike, params=None) -> Tensor:
        """x_t: (B, k·d_a)、t: (B,)、context: (B, 2·d_o)"""
        params = self.store.params if params is None else params
        x_t, context = T.as_tensor(x_t), T.as_tensor(context)
        if context.shape[-1] != 2 * self.d_o:
            raise ShapeError(f"context dim {context.shape[-1]} != {2 * self.d_o}")
        embedding = timestep_embedding(t, self.embed_dim).astype(x_t.dtype)
        return mlp_forward(params, self.spec, T.concat([x_t, embedding, T.as_tensor(context)], axis=-1))

    def clone_params(self):
        return {k: v.copy() for k, v in self.store.params.items()}


def ddpm_loss(policy: DiffusionPolicy, context, chunks, rng: np.random.Generator, params=None) -> Tensor:
    """ランダムな時刻でノイズを加え、予測ノイズとの二乗誤差（エントリ和のバッチ平均）"""
    chunks = np.asarray(chunks)
    context = np.asarray(context)
    if chunks.ndim != 3 or chunks.shape[1:] != (policy.chunk, policy.d_a):
        raise ShapeError(f"chunks must be (B, {policy.chunk}, {policy.d_a}), got {chunks.shape}")
    batch = chunks.shape[0]
    dtype = chunks.dtype
    x0 = chunks.reshape(batch, -1)
    t = rng.integers(0, policy.schedule.steps, size=batch)
    noise = rng.standard_normal(x0.shape).astype(dtype)
    alpha_bar = policy.schedule.alphas_cumprod[t][:, None].astype(dtype)
    x_t = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise
    predicted = policy.predict_noise(x_t, t, context.astype(dtype), params)
    return T.reduce_mean(T.reduce_sum(T.square(T.sub(predicted, noise)), axis=-1))


def ddim_sample(policy: DiffusionPolicy, context, rng: np.random.Generator) -> np.ndarray:
    """決定的DDIM逆過程（η=0）。context が1次元なら (k, d_a)、2次元なら (B, k, d_a)"""
    context = np.asarray(context, dtype=np.float32)
    single = context.ndim == 1
    if single:
        context = context[None]
    batch = context.shape[0]
    schedule = policy.schedule
    x = rng.standard_normal((batch, policy.flat_dim)).astype(np.float32)
    timesteps = schedule.sample_timesteps
    for i, t in enumerate(timesteps):
        alpha_bar = float(schedule.alphas_cumprod[t])
        alpha_bar_prev = float(schedule.alphas_cumprod[timesteps[i + 1]]) if i + 1 < len(timesteps) else 1.0
        eps = policy.predict_noise(x, np.full(batch, t), context).value
        x0 = np.clip((x - np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha_bar), -1.0, 1.0)
        x = (np.sqrt(alpha_bar_prev) * x0 + np.sqrt(1.0 - alpha_bar_prev) * eps).astype(np.float32)
    chunks = np.clip(x, -1.0, 1.0).reshape(batch, policy.chunk, policy.d_a)
    return chunks[0] if single else chunks
