"""Dense float64 tensors with reverse-mode differentiation over a fixed op set."""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", np.ndarray, float, int]

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715

_grad_state = threading.local()


class GraphCycleError(RuntimeError):
    """Raised when the recorded op graph is not acyclic."""


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """Row-major float64 array that remembers how it was computed.

    Only leaves created with ``requires_grad=True`` receive gradients. Results of ops are
    never mutated; parameters change only through an optimizer step.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: Union[float, int]) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.name = None
    out.grad = None
    tracked = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    out._parents = tuple(parents) if tracked else ()
    out._backward = backward if tracked else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), _backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), _backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), _backward)


def power(a: Operand, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def _backward(g: np.ndarray):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _record(np.power(a.data, exponent), (a,), _backward)


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")

    def _backward(g: np.ndarray):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record(a.data @ b.data, (a, b), _backward)


def affine(x: Operand, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0

    def _backward(g: np.ndarray):
        return (g * active,)

    return _record(np.where(active, a.data, 0.0), (a,), _backward)


def gelu(a: Operand) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere so finite differences stay exact."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x**3)
    t = np.tanh(inner)

    def _backward(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return _record(0.5 * x * (1.0 + t), (a,), _backward)


def softmax(a: Operand, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), _backward)


def log_softmax(a: Operand, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def _backward(g: np.ndarray):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), _backward)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def _backward(g: np.ndarray):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward)


def reduce_mean(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)

    def _backward(g: np.ndarray):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return _record(out, (a,), _backward)


def mse_loss(pred: Operand, target: Operand) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    scale = 2.0 / max(diff.size, 1)

    def _backward(g: np.ndarray):
        grad = g * scale * diff
        return grad, -grad

    return _record(np.mean(diff**2), (pred, target), _backward)


def cross_entropy(logits: Operand, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logp = log_softmax(logits, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return mul(reduce_mean(picked), -1.0)


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)

    def _backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _record(a.data.reshape(tuple(shape)), (a,), _backward)


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(perm))

    def _backward(g: np.ndarray):
        return (g.transpose(inverse),)

    return _record(a.data.transpose(perm), (a,), _backward)


def getitem(a: Operand, index) -> Tensor:
    a = as_tensor(a)

    def _backward(g: np.ndarray):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _record(a.data[index], (a,), _backward)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)

    def _backward(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _record(table.data[ids], (table,), _backward)


def conv1d(x: Operand, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 convolution of ``x`` (B, C_in, L) with ``weight`` (C_out, C_in, K)."""
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv1d shape mismatch: input {x.shape}, weight {weight.shape}")
    batch, c_in, _ = x.shape
    c_out, _, kernel = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    length_padded = xp.shape[2]
    length_out = length_padded - kernel + 1
    if length_out < 1:
        raise ValueError(f"conv1d input length {x.shape[2]} too short for kernel {kernel}")

    cols = np.stack([xp[:, :, k : k + length_out] for k in range(kernel)], axis=-1)
    cols = cols.transpose(0, 2, 1, 3).reshape(batch, length_out, c_in * kernel)
    w_mat = weight.data.reshape(c_out, c_in * kernel)
    out = (cols @ w_mat.T).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def _backward(g: np.ndarray):
        g_t = g.transpose(0, 2, 1)
        grad_w = (g_t.reshape(-1, c_out).T @ cols.reshape(-1, c_in * kernel)).reshape(weight.shape)
        g_cols = (g_t @ w_mat).reshape(batch, length_out, c_in, kernel)
        grad_xp = np.zeros_like(xp)
        for k in range(kernel):
            grad_xp[:, :, k : k + length_out] += g_cols[:, :, :, k].transpose(0, 2, 1)
        grad_x = grad_xp[:, :, padding : length_padded - padding] if padding else grad_xp
        grads: List[Optional[np.ndarray]] = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, _backward)


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize along ``axis`` then apply a per-feature scale and shift."""
    mu = reduce_mean(x, axis=axis, keepdims=True)
    centered = x - mu
    var = reduce_mean(centered * centered, axis=axis, keepdims=True)
    normed = centered * power(var + eps, -0.5)
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return normed * reshape(gamma, shape) + reshape(beta, shape)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    state: Dict[int, int] = {}
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphCycleError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            parent_mark = state.get(id(parent))
            if parent_mark == 1:
                raise GraphCycleError(f"cycle detected at {parent!r}")
            if parent_mark is None:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every reachable leaf with ``requires_grad``.

    Leaves also get the result stored in ``.grad``. Returns the leaf -> gradient map.
    """
    if loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    return leaves
