"""
有限差分による勾配検証
"""

import logging
from typing import Callable, Mapping, Optional

import numpy as np

from src.tensorcore.tape import Tape, Tensor
from src.utils.common import NonFiniteError

logger = logging.getLogger(__name__)

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def _scalar(out: Tensor) -> float:
    value = np.asarray(out.value)
    if value.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {value.shape}")
    value = float(value.reshape(()))
    if not np.isfinite(value):
        raise NonFiniteError(f"grad_check: function value is {value}")
    return value


def _evaluate(fn: LossFn, params: Mapping[str, np.ndarray]) -> float:
    return _scalar(fn({k: Tensor(v) for k, v in params.items()}))


def grad_check(fn: LossFn, params: Mapping[str, np.ndarray], tolerance: float = 1e-3,
               step: float = 1e-4, coords_per_param: int = 6, floor: float = 1e-4,
               rng: Optional[np.random.Generator] = None) -> float:
    """テープ勾配と中心差分の最大相対誤差を返す（64bitで評価）

    fn は同じ入力に対して決定的でなければならない。
    大きなパラメータは coords_per_param 個の座標だけを抜き取って比較する。
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    with Tape() as tape:
        watched = tape.watch(params64)
        out = fn(watched)
    _scalar(out)
    grads = tape.gradient(out, watched)

    max_error = 0.0
    worst = None
    for name, value in params64.items():
        size = value.size
        coords = range(size) if size <= coords_per_param else rng.choice(size, coords_per_param, replace=False)
        for flat in coords:
            original = value.flat[flat]
            value.flat[flat] = original + step
            f_plus = _evaluate(fn, params64)
            value.flat[flat] = original - step
            f_minus = _evaluate(fn, params64)
            value.flat[flat] = original

            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grads[name].flat[flat])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if error > max_error:
                max_error, worst = error, (name, int(flat), analytic, numeric)

    if max_error > tolerance and worst is not None:
        logger.warning("grad_check: max relative error %.3g at %s[%d] (tape %.6g, numeric %.6g)",
                       max_error, *worst)
    return max_error
