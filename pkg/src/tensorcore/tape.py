"""
リバースモード自動微分（テープ方式）

Tape をコンテキストとして有効にしている間、requires_grad なテンソルを含む演算が
ノードとして記録される。gradient() は記録順の逆に各ノードを一度だけ辿り、
ファンアウトの勾配は加算で集約する。
"""

from numbers import Number
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.common import ShapeError

_ACTIVE_TAPES: List['Tape'] = []


class Tensor:
    __slots__ = ('value', 'requires_grad', '__weakref__')
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, Number]


class _Node:
    __slots__ = ('output', 'inputs', 'backward')

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """演算記録テープ"""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> 'Tape':
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)

    def watch(self, arrays: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
        """パラメータ配列を勾配追跡する葉テンソルに包む"""
        return {name: Tensor(value, requires_grad=True) for name, value in arrays.items()}

    def gradient(self, target: Tensor, sources) -> Union[Dict[str, np.ndarray], List[np.ndarray]]:
        """target を sources について微分（逆順スイープ）"""
        grads: Dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig

        def lookup(t: Tensor) -> np.ndarray:
            g = grads.get(id(t))
            return np.zeros_like(t.value) if g is None else np.asarray(g, dtype=t.value.dtype)

        if isinstance(sources, Mapping):
            return {name: lookup(t) for name, t in sources.items()}
        return [lookup(t) for t in sources]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x))


def _make(value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---- 算術演算 ----

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return _make(a.value + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return _make(a.value - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return _make(a.value * b, (a,), lambda g: (g * b,))
    b = as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        return _make(a.value / b, (a,), lambda g: (g / b,))
    b = as_tensor(b)
    return _make(a.value / b.value, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * a.value / (b.value * b.value), b.shape)))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.value, b.value), (a, b), backward)


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(value, tensors, backward)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.value for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(value, tensors, backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(a.value)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), backward)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    """和（64bitで集計）"""
    a = as_tensor(a)
    value = np.sum(a.value, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return _make(value, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).astype(a.dtype),))


def reduce_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / max(count, 1))


# ---- 要素ごとの関数 ----

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.value)
    return _make(y, (a,), lambda g: (0.5 * g / y,))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.value)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.value)
    return _make(a.value * s, (a,), lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


def silu_grad(a: TensorLike) -> Tensor:
    """SiLUの導関数 σ(a)(1 + a(1 - σ(a)))。勾配ペナルティの二階微分用"""
    a = as_tensor(a)
    s = _sigmoid(a.value)
    ds = s * (1.0 - s)
    value = s + a.value * ds
    return _make(value, (a,), lambda g: (g * ds * (2.0 + a.value * (1.0 - 2.0 * s)),))


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.value), (a,), lambda g: (g * _sigmoid(a.value),))


def maximum(a: TensorLike, floor: float) -> Tensor:
    """max(a, floor)。floor 未満の要素には勾配を流さない"""
    a = as_tensor(a)
    mask = a.value > floor
    return _make(np.where(mask, a.value, floor).astype(a.dtype), (a,), lambda g: (g * mask,))


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def stop_gradient(a: TensorLike) -> Tensor:
    return Tensor(as_tensor(a).value)


def straight_through(sample: np.ndarray, probs: Tensor) -> Tensor:
    """順伝播はサンプルそのもの、逆伝播は確率に勾配を流す"""
    return _make(np.asarray(sample, dtype=probs.dtype), (probs,), lambda g: (g,))
