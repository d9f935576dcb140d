"""
ブートストラップ λ-リターン
"""

from typing import Optional

import numpy as np

from src.utils.common import ShapeError


def lambda_returns(rewards, values, gamma: float, lam: float,
                   continuations: Optional[np.ndarray] = None) -> np.ndarray:
    """v_t = r_t + γ_t((1−λ)V_{t+1} + λ v_{t+1})、v_k = V_k

    rewards: (..., k)、values: (..., k+1)。continuations (..., k) は γ に掛かる（0で打ち切り）。
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape[-1] < 1:
        raise ValueError("lambda_returns needs at least one reward")
    if values.shape[:-1] != rewards.shape[:-1] or values.shape[-1] != rewards.shape[-1] + 1:
        raise ShapeError(f"values must have one more step than rewards: {values.shape} vs {rewards.shape}")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError(f"gamma and lambda must be in [0, 1]: {gamma}, {lam}")
    discounts = np.full(rewards.shape, gamma)
    if continuations is not None:
        continuations = np.asarray(continuations, dtype=np.float64)
        if continuations.shape != rewards.shape:
            raise ShapeError(f"continuations shape {continuations.shape} != rewards shape {rewards.shape}")
        discounts = discounts * continuations

    k = rewards.shape[-1]
    targets = np.empty_like(rewards)
    next_return = values[..., k]
    for t in range(k - 1, -1, -1):
        next_return = rewards[..., t] + discounts[..., t] * ((1.0 - lam) * values[..., t + 1] + lam * next_return)
        targets[..., t] = next_return
    return targets


def discounted_return(rewards, terminal_value, gamma: float) -> np.ndarray:
    """Σ γ^h r_h + γ^k V_k（λ=1 の λ-リターンの先頭と一致）"""
    rewards = np.asarray(rewards, dtype=np.float64)
    k = rewards.shape[-1]
    weights = gamma ** np.arange(k)
    return rewards @ weights + gamma ** k * np.asarray(terminal_value, dtype=np.float64)
