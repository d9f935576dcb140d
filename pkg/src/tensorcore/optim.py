"""
パラメータストアと最適化（Adam / AdamW、EMA、学習率スケジュール）
"""

import logging
import math
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from src.utils.common import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


class ParamStore:
    """名前付きパラメータ群とAdamのモーメント、任意のEMAシャドウを保持する"""

    def __init__(self, params: Mapping[str, np.ndarray], name: str = '', with_ema: bool = False,
                 dtype=np.float32):
        self.name = name
        self.params: Dict[str, np.ndarray] = {k: np.array(v, dtype=dtype) for k, v in params.items()}
        self.adam_m: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.ema: Optional[Dict[str, np.ndarray]] = (
            {k: v.copy() for k, v in self.params.items()} if with_ema else None)
        self.step = 0
        self.last_grad_norm = 0.0
        self.check_finite()

    def __getitem__(self, key: str) -> np.ndarray:
        return self.params[key]

    def __contains__(self, key: str) -> bool:
        return key in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        """値を上書きする（形状は作成後に変更できない）"""
        for key, value in values.items():
            if key not in self.params:
                raise KeyError(f"{self.name}: unknown parameter '{key}'")
            value = np.asarray(value)
            if value.shape != self.params[key].shape:
                raise ShapeError(f"{self.name}/{key}: shape {value.shape} != {self.params[key].shape}")
            self.params[key] = value.astype(self.params[key].dtype)
        self.check_finite()

    def cast(self, dtype) -> Dict[str, np.ndarray]:
        """別の精度のコピー（勾配チェック用）"""
        return {k: v.astype(dtype) for k, v in self.params.items()}

    def check_finite(self) -> None:
        for key, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"non-finite parameter {self.name}/{key}")

    def update_ema(self, decay: float) -> None:
        if self.ema is None:
            raise ValueError(f"{self.name}: store has no EMA shadow")
        ema_update(self.ema, self.params, decay)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip_norm: Optional[float] = 100.0, weight_decay: float = 0.0) -> ParamStore:
    """バイアス補正付きAdam。更新前に全体ノルムでクリップ、weight_decay>0 ならAdamW"""
    for key, g in grads.items():
        if key not in store.params:
            raise KeyError(f"{store.name}: gradient for unknown parameter '{key}'")
        if g.shape != store.params[key].shape:
            raise ShapeError(f"{store.name}/{key}: gradient shape {g.shape} != {store.params[key].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {store.name}/{key} at step {store.step}")

    norm = global_norm(grads)
    store.last_grad_norm = norm
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        logger.debug("%s: clipping gradient norm %.3g -> %.3g", store.name, norm, clip_norm)

    store.step += 1
    t = store.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for key, g in grads.items():
        p = store.params[key]
        g = g.astype(np.float64) * scale
        m = beta1 * store.adam_m[key] + (1.0 - beta1) * g
        v = beta2 * store.adam_v[key] + (1.0 - beta2) * g * g
        store.adam_m[key] = m.astype(p.dtype)
        store.adam_v[key] = v.astype(p.dtype)
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        if weight_decay > 0:
            update = update + weight_decay * p
        store.params[key] = (p - lr * update).astype(p.dtype)
    # 勾配なしのパラメータもモーメントは減衰させる
    for key in store.params.keys() - grads.keys():
        store.adam_m[key] = (beta1 * store.adam_m[key]).astype(store.params[key].dtype)
        store.adam_v[key] = (beta2 * store.adam_v[key]).astype(store.params[key].dtype)
    store.check_finite()
    return store


def ema_update(shadow: Dict[str, np.ndarray], primary: Mapping[str, np.ndarray], decay: float) -> Dict[str, np.ndarray]:
    """shadow ← decay·shadow + (1−decay)·primary"""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must be in [0, 1]: {decay}")
    for key, value in primary.items():
        if shadow[key].shape != value.shape:
            raise ShapeError(f"EMA shadow '{key}': {shadow[key].shape} != {value.shape}")
        if decay == 1.0:
            continue
        if decay == 0.0:
            shadow[key] = value.copy()
        else:
            shadow[key] = (decay * shadow[key] + (1.0 - decay) * value).astype(value.dtype)
    return shadow


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float, warmup_steps: int = 0) -> float:
    """線形ウォームアップ後、lr_max から lr_min へコサイン減衰"""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    decay_steps = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / decay_steps, 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
