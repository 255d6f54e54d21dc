"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node holding its inputs and a closure that
routes the output gradient back to them. ``backward`` walks the graph
once in reverse topological order, so repeated backward passes over the
same graph are deterministic and bit-identical.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __getitem__(self, key) -> "Tensor":
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor; frozen parameters are never written by optimizers."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents, _backward_fn=backward_fn if requires else None)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with requires_grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    # derived nodes get fresh gradients each pass; leaves keep accumulating
    for node in topo:
        if node._parents:
            node.grad = None
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return _node(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def back(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(-_unbroadcast(g, b.shape))

    return _node(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), back)


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * factor

    def back(g: np.ndarray) -> None:
        a.accumulate_grad(g * factor)

    return _node(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        b.accumulate_grad(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _node(out, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def back(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            t.accumulate_grad(piece)

    return _node(out, tuple(tensors), back)


def take(a: Tensor, key) -> Tensor:
    """Indexing with basic slices or integer index arrays."""
    out = a.data[key]
    fancy = any(isinstance(k, (np.ndarray, list)) for k in (key if isinstance(key, tuple) else (key,)))

    def back(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        if fancy:
            np.add.at(buf, key, g)
        else:
            buf[key] += g
        a.accumulate_grad(buf)

    return _node(np.ascontiguousarray(out), (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))

    def back(g: np.ndarray) -> None:
        a.accumulate_grad(g.reshape(a.shape))

    return _node(out, (a,), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def back(g: np.ndarray) -> None:
        a.accumulate_grad(g.transpose(inverse))

    return _node(out, (a,), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding ids out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def back(g: np.ndarray) -> None:
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        table.accumulate_grad(buf)

    return _node(out, (table,), back)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g: np.ndarray) -> None:
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g_exp, a.shape).copy())

    return _node(out, (a,), back)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU, the backbone family's nonlinearity."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        a.accumulate_grad(g * deriv)

    return _node(out, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def back(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out * (g - inner))

    return _node(out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def back(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        gain.accumulate_grad((g * normed).sum(axis=lead))
        bias.accumulate_grad(g.sum(axis=lead))
        g_normed = g * gain.data
        x.accumulate_grad(
            inv_std
            * (
                g_normed
                - g_normed.mean(axis=-1, keepdims=True)
                - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
            )
        )

    return _node(out, (x, gain, bias), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Accepts a single logit vector with an integer label, or a
    (batch, classes) matrix with a label per row.
    """
    squeeze = logits.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy expects 1-D or 2-D logits, got shape {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match batch of {z.shape[0]}")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError(f"label out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, y]
    out = losses.mean()

    def back(g: np.ndarray) -> None:
        probs = np.exp(shifted - lse[:, None])
        probs[rows, y] -= 1.0
        grad = probs * (g.item() / z.shape[0])
        logits.accumulate_grad(grad.reshape(logits.shape))

    return _node(np.asarray(out), (logits,), back)
