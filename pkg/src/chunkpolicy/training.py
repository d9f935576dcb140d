"""
行動クローニング（事前学習と蒸留）
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from src.chunkpolicy.diffusion import DiffusionPolicy, ddpm_loss, obs_context
from src.envkit.tasks import Trajectory
from src.tensorcore.optim import adam_step, cosine_lr
from src.tensorcore.tape import Tape

logger = logging.getLogger(__name__)


@dataclass
class ChunkDataset:
    contexts: np.ndarray   # (N, 2·d_o)
    chunks: np.ndarray     # (N, k, d_a)

    def __len__(self) -> int:
        return len(self.contexts)

    @classmethod
    def concat(cls, datasets: Sequence['ChunkDataset']) -> 'ChunkDataset':
        return cls(np.concatenate([d.contexts for d in datasets]), np.concatenate([d.chunks for d in datasets]))

    def sample(self, size: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self), size=size)
        return self.contexts[idx], self.chunks[idx]


def chunk_targets(actions: np.ndarray, chunk: int) -> np.ndarray:
    """各ステップから始まる k ステップの行動（末尾は最後の行動で埋める）"""
    length = len(actions)
    idx = np.minimum(np.arange(length)[:, None] + np.arange(chunk)[None], length - 1)
    return actions[idx]


def trajectory_contexts(traj: Trajectory) -> np.ndarray:
    """(o_{t-1}, o_t) の列。o_{-1} = o_0"""
    prev = np.concatenate([traj.obs[:1], traj.obs[:-1]], axis=0)
    return obs_context(prev, traj.obs)


def chunk_dataset(trajectories: Sequence[Trajectory], chunk: int) -> ChunkDataset:
    if not trajectories:
        raise ValueError("chunk dataset needs at least one trajectory")
    contexts = [trajectory_contexts(t) for t in trajectories]
    chunks = [chunk_targets(t.actions, chunk) for t in trajectories]
    return ChunkDataset(np.concatenate(contexts).astype(np.float32), np.concatenate(chunks).astype(np.float32))


def bc_fit(policy: DiffusionPolicy, dataset: ChunkDataset, iterations: int, rng: np.random.Generator,
           batch_size: int = 256, lr_max: float = 1e-4, lr_min: float = 1e-5, warmup_steps: int = 0,
           weight_decay: float = 0.0, clip_norm: Optional[float] = 100.0,
           mix_with: Optional[ChunkDataset] = None) -> List[float]:
    """ddpm_loss を AdamW + コサイン学習率で最小化。mix_with があれば各バッチを半々で構成"""
    if len(dataset) == 0:
        raise ValueError("bc_fit: empty dataset")
    losses = []
    for i in range(iterations):
        if mix_with is not None and len(mix_with) > 0:
            half = batch_size // 2
            c1, a1 = dataset.sample(batch_size - half, rng)
            c2, a2 = mix_with.sample(half, rng)
            contexts, chunks = np.concatenate([c1, c2]), np.concatenate([a1, a2])
        else:
            contexts, chunks = dataset.sample(batch_size, rng)
        with Tape() as tape:
            params = tape.watch(policy.store.params)
            loss = ddpm_loss(policy, contexts, chunks, rng, params)
        grads = tape.gradient(loss, params)
        lr = cosine_lr(i, iterations, lr_max, lr_min, warmup_steps)
        adam_step(policy.store, grads, lr=lr, clip_norm=clip_norm, weight_decay=weight_decay)
        losses.append(float(loss.value))
        if (i + 1) % 1000 == 0:
            logger.info("bc_fit %d/%d: loss %.4f", i + 1, iterations, np.mean(losses[-1000:]))
    return losses


def bc_fit_from_settings(policy: DiffusionPolicy, dataset: ChunkDataset, iterations: int,
                         rng: np.random.Generator, settings, warmup: bool = True,
                         mix_with: Optional[ChunkDataset] = None) -> List[float]:
    return bc_fit(policy, dataset, iterations, rng, batch_size=settings.batch_size, lr_max=settings.lr_max,
                  lr_min=settings.lr_min, warmup_steps=settings.warmup_steps if warmup else 0,
                  weight_decay=settings.weight_decay, clip_norm=settings.clip_norm, mix_with=mix_with)
