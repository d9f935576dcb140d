"""
スクリプト化されたエキスパート（ウェイポイントPD制御）
"""

import numpy as np

from src.envkit.tasks import PointMassState, TaskSpec
from src.utils.common import UnknownTaskError


def _track(state: PointMassState, target: np.ndarray, gain: float, max_speed: float) -> np.ndarray:
    """目標点へ向かう速度指令を、速度積分ダイナミクス用の行動に変換"""
    v_des = gain * (target - state.pos)
    speed = np.linalg.norm(v_des)
    if speed > max_speed:
        v_des = v_des * (max_speed / speed)
    return np.clip((v_des - state.vel) / max_speed, -1.0, 1.0)


def _point_reach(task: TaskSpec, state: PointMassState) -> np.ndarray:
    return _track(state, state.goal, float(task.expert['gain']), float(task.geometry['max_speed']))


def _obstacle_target(task: TaskSpec, state: PointMassState) -> np.ndarray:
    g, e = task.geometry, task.expert
    radius = float(g['obstacle_radius'])
    cx, cy = state.obstacle
    side = 1.0 if state.pos[1] >= cy else -1.0
    lane_y = cy + side * (radius + float(e['lane_margin']))
    height = side * (state.pos[1] - cy)

    if state.pos[0] < cx - radius - 0.05 and height < radius + float(e['climb_margin']):
        return np.array([cx - radius - 0.1, lane_y])
    if state.pos[0] < cx + radius + 0.1:
        return np.array([cx + radius + 0.15, lane_y])
    return state.goal


def _point_reach_obstacle(task: TaskSpec, state: PointMassState) -> np.ndarray:
    target = _obstacle_target(task, state)
    return _track(state, target, float(task.expert['gain']), float(task.geometry['max_speed']))


def _peg_slot(task: TaskSpec, state: PointMassState) -> np.ndarray:
    g, e = task.geometry, task.expert
    wall_y = float(g['wall_y'])
    tolerance = float(g['angle_tolerance'])
    angle_gain = 0.5 / (float(g['dt']) * float(g['max_turn_rate']))
    turn = float(np.clip(-angle_gain * state.angle, -1.0, 1.0))

    dx = abs(state.pos[0] - state.slot_x)
    entering = state.pos[1] < wall_y + 0.02
    aligned = dx < float(e['align_tolerance']) and abs(state.angle) < tolerance / 2
    if entering or aligned:
        target = np.array([state.slot_x, state.goal[1] - 0.05])
    else:
        target = np.array([state.slot_x, wall_y + float(e['approach_height'])])
    move = _track(state, target, float(e['gain']), float(g['max_speed']))
    return np.concatenate([move, [turn]])


_CONTROLLERS = {
    'point_reach': _point_reach,
    'point_reach_obstacle': _point_reach_obstacle,
    'peg_slot_2d': _peg_slot,
}


def expert_action(task: TaskSpec, state: PointMassState) -> np.ndarray:
    """エキスパート行動（各成分 [-1, 1]）"""
    if task.name not in _CONTROLLERS:
        raise UnknownTaskError(f"no scripted expert for task '{task.name}'")
    action = _CONTROLLERS[task.name](task, state)
    return np.clip(action, -1.0, 1.0).astype(np.float32)
