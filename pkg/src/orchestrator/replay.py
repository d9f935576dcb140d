"""
リプレイバッファ（軌跡単位のFIFO）とハイブリッドサンプリング
"""

import logging
from collections import deque
from typing import Iterable, List, Sequence

import numpy as np

from src.envkit.demos import DemoSet, load_demos, save_trajectories
from src.envkit.tasks import Trajectory
from src.latentwm.training import SubsequenceBatch, hybrid_batch

logger = logging.getLogger(__name__)


class ReplayBuffer:
    """容量（遷移数）を超えたら古い軌跡から捨てる"""

    def __init__(self, capacity: int = 100000):
        if capacity < 1:
            raise ValueError(f"capacity must be positive: {capacity}")
        self.capacity = capacity
        self._trajectories: deque = deque()
        self._transitions = 0
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._trajectories)

    @property
    def num_transitions(self) -> int:
        return self._transitions

    @property
    def trajectories(self) -> List[Trajectory]:
        return list(self._trajectories)

    @property
    def next_id(self) -> int:
        return self._next_id

    def add(self, traj: Trajectory) -> int:
        """軌跡を追加してIDを返す"""
        if len(traj) > self.capacity:
            raise ValueError(f"trajectory of {len(traj)} transitions exceeds capacity {self.capacity}")
        traj.traj_id = self._next_id
        self._next_id += 1
        self._trajectories.append(traj)
        self._transitions += len(traj)
        while self._transitions > self.capacity:
            evicted = self._trajectories.popleft()
            self._transitions -= len(evicted)
            logger.debug("evicted trajectory %d (%d transitions)", evicted.traj_id, len(evicted))
        return traj.traj_id

    def extend(self, trajectories: Iterable[Trajectory]) -> None:
        for traj in trajectories:
            self.add(traj)

    def latest(self, n: int) -> List[Trajectory]:
        """最新 n 本（足りなければ全部）"""
        return list(self._trajectories)[-n:] if n > 0 else []

    def save(self, path, task_name: str, d_o: int, d_a: int, horizon: int) -> None:
        save_trajectories(path, task_name, d_o, d_a, horizon, self.trajectories)

    @classmethod
    def load(cls, path, capacity: int, traj_ids: Sequence[int], next_id: int) -> 'ReplayBuffer':
        """保存した軌跡とIDからバッファを復元"""
        buffer = cls(capacity)
        stored = load_demos(path)
        if len(traj_ids) != len(stored):
            raise ValueError(f"{path}: {len(stored)} trajectories but {len(traj_ids)} ids")
        for traj, traj_id in zip(stored.trajectories, traj_ids):
            traj.traj_id = int(traj_id)
            buffer._trajectories.append(traj)
            buffer._transitions += len(traj)
        buffer._next_id = next_id
        return buffer


def hybrid_sample(demos: DemoSet, buffer: ReplayBuffer, batch_size: int, length: int,
                  rng: np.random.Generator) -> SubsequenceBatch:
    """半分デモ・半分リプレイの部分系列バッチ"""
    if len(demos) == 0:
        raise ValueError("hybrid_sample: demo set is empty")
    if len(buffer) == 0:
        raise ValueError("hybrid_sample: replay buffer is empty")
    return hybrid_batch(demos.trajectories, buffer.trajectories, batch_size, length, rng)
