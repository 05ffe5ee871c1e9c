"""
Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Operations record themselves on the active ``Tape`` (one per thread) when any
input requires a gradient; outside a tape they only compute values.

    with Tape() as tape:
        loss = (w * w).sum()
    grads = backward(tape, loss)
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import InvalidSegmentId, NonScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_ids = itertools.count()
_state = threading.local()
_dtype = np.float64


def set_default_dtype(dtype: type) -> None:
    global _dtype
    _dtype = np.dtype(dtype).type


def default_dtype() -> type:
    return _dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = "") -> None:
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return add(as_tensor(other), neg(self))

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


TensorLike = Union[Tensor, ArrayLike]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class _Record:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Operation records in execution (hence topological) order."""

    records: List[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Optional[Tape]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _result(
    value: np.ndarray,
    inputs: Tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# Elementwise


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), the building block of binary cross-entropy on logits."""
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# Linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(value, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise InvalidSegmentId(f"gather_rows: index out of range for {a.shape[0]} rows")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(a.data[index], (a,), backward)


def segment_sum(values: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Row sums per segment: out[s] = sum of values[i] with segment_ids[i] == s."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != values.shape[0]:
        raise ShapeMismatch(f"segment_sum: {ids.shape[0]} ids for {values.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise InvalidSegmentId(f"segment ids must lie in [0, {n_segments})")
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(out, ids, values.data)
    return _result(out, (values,), lambda g: (g[ids],))


# Reductions


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    value = a.data.sum(axis=axis)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(value, (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / max(count, 1))


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    peak = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    value = (np.log(total) + peak).squeeze(axis)
    softmax = shifted / total
    return _result(value, (a,), lambda g: (np.expand_dims(g, axis) * softmax,))


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.data / norm

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (a,), backward)


# Stochastic


def dropout(
    a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True
) -> Tensor:
    """Inverted dropout; the identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, stream)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# Backward


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradients of ``loss`` for every tensor on the tape that requires one.

    Leaf tensors also get ``.grad`` accumulated.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    grads: Dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for record in reversed(tape.records):
        g = grads.pop(record.output, None) if record.output is not loss else grads.get(loss)
        if g is None:
            continue
        for tensor, grad in zip(record.inputs, record.backward(g)):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                grad = grad.reshape(tensor.shape)
            if tensor in grads:
                grads[tensor] = grads[tensor] + grad
            else:
                grads[tensor] = grad
    produced = {record.output for record in tape.records}
    leaves = {t: g for t, g in grads.items() if t not in produced}
    for tensor, grad in leaves.items():
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
    return leaves


# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = True
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
) -> Dict[str, Tensor]:
    """One Adam update in place; missing gradients count as zero.

    Decoupled decay shrinks each parameter by ``lr * weight_decay`` before
    the moment update; coupled decay adds ``weight_decay * param`` to the
    gradient instead.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        elif g.shape != param.shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        if m.shape != param.shape:
            raise ShapeMismatch(f"Adam moments for {name}: {m.shape} vs {param.shape}")
        if state.weight_decay:
            if state.decoupled:
                param.data = param.data - state.lr * state.weight_decay * param.data
            else:
                g = g + state.weight_decay * param.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
