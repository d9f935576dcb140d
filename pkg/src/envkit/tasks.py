"""
トイ連続制御タスク
速度積分型の質点ダイナミクス（Δt=0.1、速度クランプ、加法ガウスプロセスノイズ）
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.utils.common import EnvContractError, UnknownTaskError, load_tasks_config


@dataclass(frozen=True, eq=False)
class TaskSpec:
    name: str
    d_o: int
    d_a: int
    horizon: int
    process_noise_std: float
    success: str
    geometry: Mapping[str, Any] = field(default_factory=dict)
    expert: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive: {self.horizon}")
        if self.process_noise_std < 0:
            raise ValueError(f"process_noise_std must be >= 0: {self.process_noise_std}")


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    continuation: int
    success: bool


@dataclass(eq=False)
class Trajectory:
    """観測・行動を配列で保持する軌跡（最後の観測 final_obs を別に持つ）"""
    obs: np.ndarray            # (T, d_o) float32
    actions: np.ndarray        # (T, d_a) float32
    continuations: np.ndarray  # (T,) uint8
    successes: np.ndarray      # (T,) bool
    final_obs: np.ndarray      # (d_o,) float32
    success: bool
    traj_id: int = -1

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: List[Transition], final_obs: np.ndarray) -> 'Trajectory':
        if not transitions:
            raise ValueError("trajectory needs at least one transition")
        return cls(
            obs=np.stack([t.obs for t in transitions]).astype(np.float32),
            actions=np.stack([t.action for t in transitions]).astype(np.float32),
            continuations=np.array([t.continuation for t in transitions], dtype=np.uint8),
            successes=np.array([t.success for t in transitions], dtype=bool),
            final_obs=np.asarray(final_obs, dtype=np.float32),
            success=bool(any(t.success for t in transitions)),
        )

    @property
    def transitions(self) -> List[Transition]:
        return [
            Transition(self.obs[i], self.actions[i], int(self.continuations[i]), bool(self.successes[i]))
            for i in range(len(self))
        ]

    def observations(self) -> np.ndarray:
        """o_0 .. o_T（final_obs を含む）"""
        return np.concatenate([self.obs, self.final_obs[None]], axis=0)

    def sequence_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """世界モデル用の系列: 観測 o_i、直前の行動 a_{i-1}、継続フラグ c_i（長さ T+1）"""
        obs = self.observations()
        prev_actions = np.concatenate([np.zeros((1, self.actions.shape[1]), np.float32), self.actions], axis=0)
        cont = np.concatenate([[1.0], self.continuations.astype(np.float32)]).astype(np.float32)
        return obs, prev_actions, cont


@lru_cache(maxsize=8)
def _registry(tasks_file: str) -> Dict[str, TaskSpec]:
    config = load_tasks_config(tasks_file)
    registry = {}
    for entry in config.get('tasks', []):
        registry[entry['name']] = TaskSpec(
            name=entry['name'],
            d_o=int(entry['d_o']),
            d_a=int(entry['d_a']),
            horizon=int(entry['horizon']),
            process_noise_std=float(entry['process_noise_std']),
            success=entry.get('success', ''),
            geometry=dict(entry.get('geometry', {})),
            expert=dict(entry.get('expert', {})),
        )
    return registry


def get_task(name: str, tasks_file: str = 'config/tasks.yaml') -> TaskSpec:
    """タスク名からTaskSpecを取得"""
    registry = _registry(tasks_file)
    if name not in registry:
        raise UnknownTaskError(f"unknown task '{name}' (registered: {sorted(registry)})")
    return registry[name]


def list_tasks(tasks_file: str = 'config/tasks.yaml') -> List[str]:
    return sorted(_registry(tasks_file))


@dataclass
class PointMassState:
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    t: int = 0
    done: bool = False
    succeeded: bool = False
    obstacle: Optional[np.ndarray] = None
    stuck: bool = False
    angle: float = 0.0
    slot_x: float = 0.0
    inserted: bool = False


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    continuation: int
    success: bool


class PointMassEnv:
    """質点到達タスクの基底クラス"""

    def __init__(self, task: TaskSpec, process_noise_std: Optional[float] = None):
        self.task = task
        self.geometry = task.geometry
        self.noise_std = task.process_noise_std if process_noise_std is None else float(process_noise_std)
        self.dt = float(self.geometry.get('dt', 0.1))
        self.max_speed = float(self.geometry.get('max_speed', 1.0))
        self.state: Optional[PointMassState] = None
        self._rng = np.random.default_rng(0)

    def _uniform(self, key: str) -> float:
        low, high = self.geometry[key]
        return float(self._rng.uniform(low, high))

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self.state = self._initial_state()
        return self.observe()

    def _initial_state(self) -> PointMassState:
        pos = np.array([self._uniform('start_x'), self._uniform('start_y')])
        goal = np.array([self._uniform('goal_x'), self._uniform('goal_y')])
        return PointMassState(pos=pos, vel=np.zeros(2), goal=goal)

    def observe(self) -> np.ndarray:
        s = self.state
        return np.concatenate([s.pos, s.vel, s.goal - s.pos]).astype(np.float32)

    def _integrate(self, action: np.ndarray) -> None:
        s = self.state
        s.vel = np.clip(s.vel + action[:2] * self.max_speed, -self.max_speed, self.max_speed)
        noise = self._rng.normal(0.0, self.noise_std, size=2) if self.noise_std > 0 else np.zeros(2)
        s.pos = np.clip(s.pos + self.dt * s.vel + noise, -1.0, 1.0)

    def _is_success(self) -> bool:
        radius = float(self.geometry.get('success_radius', 0.05))
        return bool(np.linalg.norm(self.state.pos - self.state.goal) < radius)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise EnvContractError("step called before reset")
        if self.state.done:
            raise EnvContractError(f"step after termination (t={self.state.t})")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != self.task.d_a or not np.all(np.isfinite(action)):
            raise EnvContractError(f"action must be {self.task.d_a} finite values, got {action}")
        action = np.clip(action, -1.0, 1.0)

        self._integrate(action)
        s = self.state
        s.t += 1
        if not s.succeeded and self._is_success():
            s.succeeded = True
        # 成功でラッチしてエピソードを打ち切る
        s.done = s.succeeded or s.t >= self.task.horizon
        return StepResult(self.observe(), 0 if s.done else 1, s.succeeded)


class PointReachEnv(PointMassEnv):
    pass


class ObstacleReachEnv(PointMassEnv):
    """ゴールの手前にペナルティ領域があり、侵入すると停止して動けなくなる"""

    def _initial_state(self) -> PointMassState:
        state = super()._initial_state()
        state.obstacle = np.array([self._uniform('obstacle_x'), self._uniform('obstacle_y')])
        return state

    def observe(self) -> np.ndarray:
        s = self.state
        return np.concatenate([s.pos, s.vel, s.goal - s.pos, s.obstacle - s.pos]).astype(np.float32)

    def _integrate(self, action: np.ndarray) -> None:
        s = self.state
        if s.stuck:
            s.vel = np.zeros(2)
            return
        super()._integrate(action)
        if np.linalg.norm(s.pos - s.obstacle) < float(self.geometry['obstacle_radius']):
            s.stuck = True
            s.vel = np.zeros(2)


class PegSlotEnv(PointMassEnv):
    """角度を合わせてからスロットへ挿入する（Square相当の精密タスク）"""

    def _initial_state(self) -> PointMassState:
        pos = np.array([self._uniform('start_x'), self._uniform('start_y')])
        slot_x = self._uniform('slot_x')
        wall_y = float(self.geometry['wall_y'])
        goal = np.array([slot_x, wall_y - float(self.geometry['insert_depth'])])
        return PointMassState(pos=pos, vel=np.zeros(2), goal=goal,
                              angle=self._uniform('start_angle'), slot_x=slot_x)

    def observe(self) -> np.ndarray:
        s = self.state
        wall_y = float(self.geometry['wall_y'])
        slot_offset = np.array([s.slot_x, wall_y]) - s.pos
        return np.concatenate([s.pos, s.vel, [s.angle], slot_offset]).astype(np.float32)

    def _integrate(self, action: np.ndarray) -> None:
        s = self.state
        g = self.geometry
        wall_y = float(g['wall_y'])
        half_width = float(g['slot_half_width'])
        tolerance = float(g['angle_tolerance'])
        was_inside = s.pos[1] < wall_y

        s.angle = float(np.clip(s.angle + self.dt * action[2] * float(g['max_turn_rate']), -np.pi / 2, np.pi / 2))
        super()._integrate(action)

        if was_inside:
            # スロット内では横方向と角度が壁で拘束される
            s.pos[0] = np.clip(s.pos[0], s.slot_x - half_width, s.slot_x + half_width)
            s.angle = float(np.clip(s.angle, -tolerance, tolerance))
        elif s.pos[1] < wall_y:
            aligned = abs(s.pos[0] - s.slot_x) < half_width and abs(s.angle) < tolerance
            if not aligned:
                s.pos[1] = wall_y
                s.vel[1] = max(s.vel[1], 0.0)
        s.pos[1] = max(s.pos[1], s.goal[1] - 0.05)

    def _is_success(self) -> bool:
        return bool(self.state.pos[1] <= self.state.goal[1] + 1e-9)


_ENV_CLASSES = {
    'point_reach': PointReachEnv,
    'point_reach_obstacle': ObstacleReachEnv,
    'peg_slot_2d': PegSlotEnv,
}


def make_env(task, process_noise_std: Optional[float] = None) -> PointMassEnv:
    """タスク名またはTaskSpecから環境を作成"""
    if isinstance(task, str):
        task = get_task(task)
    if task.name not in _ENV_CLASSES:
        raise UnknownTaskError(f"no environment registered for task '{task.name}'")
    return _ENV_CLASSES[task.name](task, process_noise_std)


def reset(task, seed: int, process_noise_std: Optional[float] = None) -> Tuple[PointMassEnv, np.ndarray]:
    """環境を作成して初期観測を返す"""
    env = make_env(task, process_noise_std)
    return env, env.reset(seed)
