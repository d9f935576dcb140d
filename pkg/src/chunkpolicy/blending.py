"""
重なり合うチャンク予測の時間的アンサンブル（行動ブレンディング）
"""

from collections import deque
from typing import Optional, Sequence, Tuple

import numpy as np


def blend_actions(predictions: Sequence[Tuple[int, np.ndarray]], decay: float = 0.1) -> np.ndarray:
    """(経過ステップ, 行動) の組を重み exp(−decay·age) で平均し [-1, 1] にクランプ"""
    if not predictions:
        raise ValueError("no chunk prediction covers this step")
    ages = np.array([age for age, _ in predictions], dtype=np.float64)
    actions = np.stack([np.asarray(a, dtype=np.float64) for _, a in predictions])
    weights = np.exp(-decay * ages)
    blended = (weights[:, None] * actions).sum(axis=0) / weights.sum()
    return np.clip(blended, -1.0, 1.0).astype(np.float32)


class ActionBlender:
    """ステップ t に予測されたチャンクを保持し、現在ステップの行動を合成する"""

    def __init__(self, chunk: int, decay: float = 0.1):
        self.chunk = chunk
        self.decay = decay
        self._history: deque = deque(maxlen=chunk)

    def reset(self) -> None:
        self._history.clear()

    def add(self, step: int, chunk: np.ndarray) -> None:
        chunk = np.asarray(chunk)
        if chunk.shape[0] != self.chunk:
            raise ValueError(f"chunk length {chunk.shape[0]} != {self.chunk}")
        self._history.append((step, chunk))

    def covering(self, step: int):
        return [(step - start, chunk[step - start]) for start, chunk in self._history
                if 0 <= step - start < self.chunk]

    def action(self, step: int) -> np.ndarray:
        return blend_actions(self.covering(step), self.decay)

    def add_and_blend(self, step: int, chunk: np.ndarray) -> np.ndarray:
        self.add(step, chunk)
        return self.action(step)

    def latest(self) -> Optional[np.ndarray]:
        return self._history[-1][1] if self._history else None
