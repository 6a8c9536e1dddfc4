"""Dense float64 tensors with tape-based reverse-mode differentiation and Adam.

Every forward operation records its parents and an adjoint closure on the output
tensor. ``backward`` walks the recorded graph in reverse topological order and
accumulates gradients additively, so a tensor used twice receives both
contributions. Graphs are rebuilt on every forward pass.

Broadcasting is deliberately limited to scalar-by-tensor; row vectors must be
expanded explicitly with ``repeat_rows``.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from shared.errors import DimensionError, DomainError, MissingGradientError, NumericError

FloatArray = NDArray[np.float64]
BackwardFn = Callable[[FloatArray], None]

ElementwiseKind = Literal["add", "sub", "mul", "relu", "sigmoid", "tanh", "softplus", "log", "exp"]


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        self.data: FloatArray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: FloatArray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> FloatArray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> FloatArray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: FloatArray) -> None:
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar ---------------------------------------------------------
    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: float) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: float) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: float) -> Tensor:
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return tensor_mean(self, axis)

    def relu(self) -> Tensor:
        return relu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def softplus(self) -> Tensor:
        return softplus(self)

    def log(self) -> Tensor:
        return log(self)

    def exp(self) -> Tensor:
        return exp(self)

    def square(self) -> Tensor:
        return square(self)


def as_tensor(value: Tensor | ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: FloatArray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(g: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    # Adjoint of scalar-by-tensor broadcasting.
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def _binary(a: Tensor | float, b: Tensor | float, op: str) -> tuple[Tensor, Tensor]:
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.shape != tb.shape and ta.ndim != 0 and tb.ndim != 0:
        raise DimensionError(f"{op}: shapes {ta.shape} and {tb.shape} differ")
    return ta, tb


# Binary elementwise ----------------------------------------------------------
def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _binary(a, b, "add")

    def _backward(g: FloatArray) -> None:
        ta._accumulate(_reduce_to(g, ta.shape))
        tb._accumulate(_reduce_to(g, tb.shape))

    return _result(ta.data + tb.data, (ta, tb), _backward, "add")


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _binary(a, b, "sub")

    def _backward(g: FloatArray) -> None:
        ta._accumulate(_reduce_to(g, ta.shape))
        tb._accumulate(_reduce_to(-g, tb.shape))

    return _result(ta.data - tb.data, (ta, tb), _backward, "sub")


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    ta, tb = _binary(a, b, "mul")

    def _backward(g: FloatArray) -> None:
        ta._accumulate(_reduce_to(g * tb.data, ta.shape))
        tb._accumulate(_reduce_to(g * ta.data, tb.shape))

    return _result(ta.data * tb.data, (ta, tb), _backward, "mul")


# Unary elementwise -----------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _backward(g: FloatArray) -> None:
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), _backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)

    def _backward(g: FloatArray) -> None:
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), _backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def _backward(g: FloatArray) -> None:
        x._accumulate(g * (1.0 - t * t))

    return _result(t, (x,), _backward, "tanh")


def softplus(x: Tensor) -> Tensor:
    def _backward(g: FloatArray) -> None:
        x._accumulate(g * special.expit(x.data))

    return _result(np.logaddexp(0.0, x.data), (x,), _backward, "softplus")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min()})")

    def _backward(g: FloatArray) -> None:
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), _backward, "log")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def _backward(g: FloatArray) -> None:
        x._accumulate(g * e)

    return _result(e, (x,), _backward, "exp")


def square(x: Tensor) -> Tensor:
    def _backward(g: FloatArray) -> None:
        x._accumulate(2.0 * g * x.data)

    return _result(x.data * x.data, (x,), _backward, "square")


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; the gradient passes only where the input is inside [low, high]."""
    inside = (x.data >= low) & (x.data <= high)

    def _backward(g: FloatArray) -> None:
        x._accumulate(g * inside)

    return _result(np.clip(x.data, low, high), (x,), _backward, "clip")


_UNARY: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "log": log,
    "exp": exp,
}
_BINARY: dict[str, Callable[[Tensor | float, Tensor | float], Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(kind: ElementwiseKind, *args: Tensor | float) -> Tensor:
    if kind in _BINARY:
        if len(args) != 2:
            raise DimensionError(f"{kind} takes two operands, got {len(args)}")
        return _BINARY[kind](args[0], args[1])
    if kind in _UNARY:
        if len(args) != 1:
            raise DimensionError(f"{kind} takes one operand, got {len(args)}")
        return _UNARY[kind](as_tensor(args[0]))
    raise DomainError(f"unknown elementwise kind '{kind}'")


# Linear algebra and reductions ------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g: FloatArray) -> None:
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), _backward, "matmul")


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    def _backward(g: FloatArray) -> None:
        if axis is None:
            x._accumulate(np.full(x.shape, float(g)))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    data = np.asarray(x.data.sum()) if axis is None else x.data.sum(axis=axis)
    return _result(data, (x,), _backward, "sum")


def tensor_mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DimensionError(f"mean over an empty axis of shape {x.shape}")
    return mul(tensor_sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = x.shape

    def _backward(g: FloatArray) -> None:
        x._accumulate(g.reshape(original))

    return _result(x.data.reshape(shape), (x,), _backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[d] != first.shape[d] for d in range(first.ndim) if d != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {first.shape} and {t.shape}"
            )
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    parts = tuple(tensors)

    def _backward(g: FloatArray) -> None:
        for part, piece in zip(parts, np.split(g, offsets, axis=axis), strict=True):
            part._accumulate(piece)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, parts, _backward, "concat")


def take_rows(x: Tensor, index: ArrayLike) -> Tensor:
    rows = np.asarray(index, dtype=np.int64)

    def _backward(g: FloatArray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        x._accumulate(full)

    return _result(x.data[rows], (x,), _backward, "take_rows")


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Expand a ``[1 x c]`` row to ``[n x c]``."""
    if x.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"repeat_rows expects a [1 x c] row, got {x.shape}")

    def _backward(g: FloatArray) -> None:
        x._accumulate(g.sum(axis=0, keepdims=True))

    return _result(np.repeat(x.data, n, axis=0), (x,), _backward, "repeat_rows")


def softmax_cross_entropy(logits: Tensor, target_probs: Tensor | ArrayLike) -> Tensor:
    """Batch mean of ``-sum_i target_i * log softmax(logits)_i``.

    Target rows may be one-hot, soft, or sum to less than one; an all-zero row
    contributes nothing.
    """
    target = as_tensor(target_probs).data
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax_cross_entropy expects [B x K>=2] logits, got {logits.shape}")
    if target.shape != logits.shape:
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} and targets {target.shape} differ"
        )
    if logits.shape[0] == 0:
        raise DimensionError("softmax_cross_entropy on an empty batch")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax_cross_entropy: non-finite logits")
    row_mass = target.sum(axis=1, keepdims=True)
    if np.any(target < 0) or np.any(row_mass > 1.0 + 1e-9):
        raise DomainError("softmax_cross_entropy: target rows must be non-negative and sum <= 1")

    batch = logits.shape[0]
    log_probs = special.log_softmax(logits.data, axis=1)

    def _backward(g: FloatArray) -> None:
        probs = np.exp(log_probs)
        logits._accumulate(float(g) * (probs * row_mass - target) / batch)

    value = np.asarray(-(target * log_probs).sum() / batch)
    return _result(value, (logits,), _backward, "softmax_cross_entropy")


# Differentiation -------------------------------------------------------------
def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of a scalar loss."""
    if loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# Optimisation ----------------------------------------------------------------
@dataclass
class AdamState:
    m: FloatArray
    v: FloatArray
    t: int = 0
    learning_rate: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_parameter(cls, param: Tensor, learning_rate: float = 4e-4) -> AdamState:
        return cls(
            m=np.zeros_like(param.data),
            v=np.zeros_like(param.data),
            learning_rate=learning_rate,
        )


def adam_step(param: Tensor, state: AdamState) -> None:
    """Bias-corrected Adam update in place; clears ``param.grad``.

    An all-zero gradient leaves the parameter and both moments untouched.
    """
    if param.grad is None:
        raise MissingGradientError("adam_step called on a parameter without a gradient")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(
            f"adam_step: state shape {state.m.shape} does not match parameter {param.shape}"
        )
    g = param.grad
    state.t += 1
    param.grad = None
    if not np.any(g):
        return
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def sample_gaussian(shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    return Tensor(rng.standard_normal(shape))
