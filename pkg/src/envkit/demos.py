"""
デモ収集とデモファイル（バイナリ形式）の読み書き
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from src.envkit.experts import expert_action
from src.envkit.tasks import TaskSpec, Trajectory, Transition, get_task, make_env
from src.utils.common import DemoCollectionError, ensure_data_directory

logger = logging.getLogger(__name__)

MAGIC = b'CSDM'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sHH')
_DIMS = struct.Struct('<IIII')
_TRAJ = struct.Struct('<IB')


@dataclass
class DemoSet:
    task_name: str
    d_o: int
    d_a: int
    horizon: int
    trajectories: List[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def rollout_expert(task: TaskSpec, seed: int, noise_std: float, rng: np.random.Generator,
                   process_noise_std: Optional[float] = None) -> Trajectory:
    """エキスパートで1エピソード実行（行動に摂動ノイズを加える）"""
    env = make_env(task, process_noise_std)
    obs = env.reset(seed)
    transitions = []
    while True:
        action = expert_action(task, env.state)
        if noise_std > 0:
            action = action + rng.normal(0.0, noise_std, size=action.shape)
        action = np.clip(action, -1.0, 1.0).astype(np.float32)
        result = env.step(action)
        transitions.append(Transition(obs, action, result.continuation, result.success))
        obs = result.obs
        if result.continuation == 0:
            break
    return Trajectory.from_transitions(transitions, obs)


def collect_demos(task, n: int, noise_std: float, seed: int,
                  retry_factor: int = 20, process_noise_std: Optional[float] = None) -> DemoSet:
    """成功したエキスパート軌跡をn本集める（失敗は破棄してリトライ）"""
    if n < 1:
        raise ValueError(f"n must be >= 1: {n}")
    if isinstance(task, str):
        task = get_task(task)
    rng = np.random.default_rng(seed)
    demos = DemoSet(task.name, task.d_o, task.d_a, task.horizon)
    attempts = 0
    max_attempts = n * retry_factor
    while len(demos) < n:
        if attempts >= max_attempts:
            raise DemoCollectionError(
                f"only {len(demos)}/{n} successful demos for {task.name} after {attempts} attempts")
        attempts += 1
        env_seed = int(rng.integers(0, 2**31 - 1))
        traj = rollout_expert(task, env_seed, noise_std, rng, process_noise_std)
        if traj.success:
            traj.traj_id = len(demos)
            demos.trajectories.append(traj)
        else:
            logger.warning("expert attempt %d on %s failed (seed %d), retrying", attempts, task.name, env_seed)
    logger.info("collected %d demos for %s in %d attempts", n, task.name, attempts)
    return demos


def _pack_flags(traj: Trajectory) -> np.ndarray:
    return (traj.continuations.astype(np.uint8) & 1) | (traj.successes.astype(np.uint8) << 1)


def save_trajectories(path, task_name: str, d_o: int, d_a: int, horizon: int,
                      trajectories: List[Trajectory]) -> None:
    """軌跡のリストをデモファイル形式で保存"""
    ensure_data_directory(str(path))
    name = task_name.encode('utf-8')
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(name)))
        f.write(name)
        f.write(_DIMS.pack(d_o, d_a, horizon, len(trajectories)))
        for traj in trajectories:
            f.write(_TRAJ.pack(len(traj), 1 if traj.success else 0))
            f.write(np.ascontiguousarray(traj.obs, dtype='<f4').tobytes())
            f.write(np.ascontiguousarray(traj.actions, dtype='<f4').tobytes())
            f.write(_pack_flags(traj).tobytes())
            f.write(np.ascontiguousarray(traj.final_obs, dtype='<f4').tobytes())


def save_demos(path, demos: DemoSet) -> None:
    save_trajectories(path, demos.task_name, demos.d_o, demos.d_a, demos.horizon, demos.trajectories)


def load_demos(path) -> DemoSet:
    """デモファイルを読み込む"""
    data = Path(path).read_bytes()
    magic, version, name_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ValueError(f"{path}: not a demo file (magic={magic!r}, version={version})")
    offset = _HEADER.size
    task_name = data[offset:offset + name_len].decode('utf-8')
    offset += name_len
    d_o, d_a, horizon, count = _DIMS.unpack_from(data, offset)
    offset += _DIMS.size

    demos = DemoSet(task_name, d_o, d_a, horizon)
    for i in range(count):
        length, success = _TRAJ.unpack_from(data, offset)
        offset += _TRAJ.size

        def take(n_items, dtype):
            nonlocal offset
            itemsize = np.dtype(dtype).itemsize
            arr = np.frombuffer(data, dtype=dtype, count=n_items, offset=offset).copy()
            offset += n_items * itemsize
            return arr

        obs = take(length * d_o, '<f4').reshape(length, d_o).astype(np.float32)
        actions = take(length * d_a, '<f4').reshape(length, d_a).astype(np.float32)
        flags = take(length, np.uint8)
        final_obs = take(d_o, '<f4').astype(np.float32)
        demos.trajectories.append(Trajectory(
            obs=obs, actions=actions,
            continuations=(flags & 1).astype(np.uint8),
            successes=((flags >> 1) & 1).astype(bool),
            final_obs=final_obs, success=bool(success), traj_id=i,
        ))
    return demos
