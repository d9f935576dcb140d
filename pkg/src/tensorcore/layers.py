"""
ニューラルネットの構成要素: MLP、GRUセル、グループ化カテゴリカル（straight-through）
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.tensorcore import tape as T
from src.tensorcore.tape import Tensor, TensorLike
from src.utils.common import ShapeError


@dataclass(frozen=True)
class MLPSpec:
    """全結合ネットの構成。sizes = (入力, 隠れ層..., 出力)、隠れ層はSiLU"""
    prefix: str
    sizes: Tuple[int, ...]
    out_scale: float = 1.0

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def names(self):
        for i in range(self.n_layers):
            yield f"{self.prefix}/w{i}", f"{self.prefix}/b{i}"

    def init(self, rng: np.random.Generator, dtype=np.float32) -> Dict[str, np.ndarray]:
        params = {}
        for i, (w_name, b_name) in enumerate(self.names()):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            scale = np.sqrt(1.0 / fan_in)
            if i == self.n_layers - 1:
                scale *= self.out_scale
            params[w_name] = (rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype)
            params[b_name] = np.zeros(fan_out, dtype=dtype)
        return params


def mlp_forward(params: Mapping[str, TensorLike], spec: MLPSpec, x: TensorLike) -> Tensor:
    """アフィン層 + SiLU を順に適用（最終層は線形）。1次元入力はベクトルで返す"""
    x = T.as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, -1))
    if x.shape[-1] != spec.sizes[0]:
        raise ShapeError(f"{spec.prefix}: input dim {x.shape[-1]} != {spec.sizes[0]}")
    h = x
    for i, (w_name, b_name) in enumerate(spec.names()):
        h = T.add(T.matmul(h, params[w_name]), params[b_name])
        if i < spec.n_layers - 1:
            h = T.silu(h)
    if squeeze:
        h = T.reshape(h, (-1,))
    return h


def mlp_input_gradient(params: Mapping[str, TensorLike], spec: MLPSpec, x: TensorLike) -> Tensor:
    """スカラー出力MLPの入力勾配 ∇_x f(x) を層ごとの閉形式でテープ上に構築する。

    結果はパラメータについて微分可能（勾配ペナルティの二階微分に使う）。
    x: (B, d) -> (B, d)
    """
    if spec.sizes[-1] != 1:
        raise ShapeError(f"{spec.prefix}: input gradient needs scalar output, got {spec.sizes[-1]}")
    x = T.as_tensor(x)
    pre_acts = []
    h = x
    for i, (w_name, b_name) in enumerate(spec.names()):
        a = T.add(T.matmul(h, params[w_name]), params[b_name])
        if i < spec.n_layers - 1:
            pre_acts.append(a)
            h = T.silu(a)

    names = list(spec.names())
    w_last = params[names[-1][0]]
    # d out / d h_{L-1} = W_L^T（バッチ方向に複製）
    g = T.matmul(T.constant(np.ones((x.shape[0], 1), dtype=x.dtype)), T.transpose(w_last))
    for i in range(spec.n_layers - 2, -1, -1):
        g = T.mul(g, T.silu_grad(pre_acts[i]))
        g = T.matmul(g, T.transpose(params[names[i][0]]))
    return g


@dataclass(frozen=True)
class GRUSpec:
    prefix: str
    input_size: int
    hidden_size: int

    def init(self, rng: np.random.Generator, dtype=np.float32) -> Dict[str, np.ndarray]:
        H, D = self.hidden_size, self.input_size
        p = {}
        for gate in ('r', 'u', 'n'):
            p[f"{self.prefix}/wx_{gate}"] = (rng.standard_normal((D, H)) / np.sqrt(D)).astype(dtype)
            p[f"{self.prefix}/wh_{gate}"] = (rng.standard_normal((H, H)) / np.sqrt(H)).astype(dtype)
            p[f"{self.prefix}/b_{gate}"] = np.zeros(H, dtype=dtype)
        p[f"{self.prefix}/bh_n"] = np.zeros(H, dtype=dtype)
        return p


def gru_step(params: Mapping[str, TensorLike], spec: GRUSpec, h_prev: TensorLike, x: TensorLike) -> Tensor:
    """GRUセル: r, u ゲートと候補状態 n から h' = u*n + (1-u)*h"""
    h_prev, x = T.as_tensor(h_prev), T.as_tensor(x)
    if h_prev.shape[-1] != spec.hidden_size or x.shape[-1] != spec.input_size:
        raise ShapeError(f"{spec.prefix}: got h {h_prev.shape}, x {x.shape}")
    p = spec.prefix

    def gate(name):
        return T.add(T.add(T.matmul(x, params[f"{p}/wx_{name}"]), T.matmul(h_prev, params[f"{p}/wh_{name}"])),
                     params[f"{p}/b_{name}"])

    r = T.sigmoid(gate('r'))
    u = T.sigmoid(gate('u'))
    hidden_n = T.add(T.matmul(h_prev, params[f"{p}/wh_n"]), params[f"{p}/bh_n"])
    n = T.tanh(T.add(T.add(T.matmul(x, params[f"{p}/wx_n"]), params[f"{p}/b_n"]), T.mul(r, hidden_n)))
    return T.add(T.mul(u, n), T.mul(T.add(T.neg(u), 1.0), h_prev))


@dataclass
class CategoricalCode:
    logits: Tensor       # (..., S, C)
    probs: Tensor        # (..., S, C)
    sample: np.ndarray   # (..., S, C) one-hot
    value: Tensor        # 順伝播はサンプル（stochastic=False なら確率）


def sample_one_hot(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """グループごとに逆CDF法で1クラスをサンプル"""
    u = rng.random(probs.shape[:-1] + (1,))
    cdf = np.cumsum(probs, axis=-1)
    idx = np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1)
    one_hot = np.zeros_like(probs)
    np.put_along_axis(one_hot, idx[..., None], 1.0, axis=-1)
    return one_hot


def categorical_straight_through(logits: TensorLike, rng: Optional[np.random.Generator],
                                 stochastic: bool = True) -> CategoricalCode:
    """順伝播はワンホット、逆伝播は softmax 確率として扱う"""
    logits = T.as_tensor(logits)
    probs = T.softmax(logits, axis=-1)
    if not stochastic:
        return CategoricalCode(logits, probs, probs.value, probs)
    sample = sample_one_hot(probs.value, rng)
    return CategoricalCode(logits, probs, sample, T.straight_through(sample, probs))


def categorical_kl(logits_p: TensorLike, logits_q: TensorLike) -> Tensor:
    """KL(p||q) をグループとクラスについて和（形状 (...)）"""
    log_p = T.log_softmax(logits_p, axis=-1)
    log_q = T.log_softmax(logits_q, axis=-1)
    p = T.exp(log_p)
    kl = T.mul(p, T.sub(log_p, log_q))
    return T.reduce_sum(T.reduce_sum(kl, axis=-1), axis=-1)
