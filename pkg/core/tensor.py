"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Graph` is a tape: while it is active (``with Graph() as g:``) every
primitive whose inputs require gradients appends one :class:`Node` to it.
Creation order is a valid topological order, so backward is a single reverse
sweep over the tape. Outside an active graph nothing is recorded, which is
the inference mode of the whole code base.
"""

import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ContractError, DimensionError

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def _graph_stack() -> List["Graph"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """A row-major float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["Node"] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, name: Optional[str] = None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=DTYPE)
        out.requires_grad = False
        out.grad = None
        out.name = name
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, self.name)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    """One recorded operation: tag, inputs, output and its vector-Jacobian product."""

    tag: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Graph:
    """Operation tape confined to the thread that entered it."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, tag: str, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> Tensor:
        node = Node(tag, inputs, output, backward)
        output.requires_grad = True
        output._node = node
        self.nodes.append(node)
        return output

    def first_nonfinite(self) -> Optional[Node]:
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or not loss.requires_grad:
            raise ContractError("loss is not reachable from any recorded leaf")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor._node is None:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                else:
                    key = id(tensor)
                    grads[key] = grad if key not in grads else grads[key] + grad


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on."""
    graph = graph or active_graph()
    if graph is None:
        raise ContractError("backward called without a recorded graph")
    graph.backward(loss)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=DTYPE))


def _result(tag: str, array: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor._wrap(array)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(tag, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(tag: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{tag}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result("div", out, (a, b), backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


# reductions

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", out, (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


# linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    inner_b = b.shape[0] if b.ndim == 1 else (b.shape[-2] if b.ndim >= 2 else None)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != inner_b:
        raise DimensionError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
    if a.ndim == 1 and b.ndim > 2:
        raise DimensionError(f"matmul: vector @ batched matrix unsupported, got {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.ndim != b.ndim:
        raise DimensionError(f"matmul: batch ranks differ for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        A, B = a.data, b.data
        if B.ndim == 1:
            ga = np.multiply.outer(g, B)
            gb = np.tensordot(A, g, axes=(list(range(A.ndim - 1)), list(range(g.ndim))))
        elif A.ndim == 1:
            ga = B @ g
            gb = np.outer(A, g)
        elif B.ndim == 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _result("matmul", out, (a, b), backward)


# structural

def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result("getitem", np.array(out, dtype=DTYPE), (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, tensors, backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("stack: nothing to stack")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result("stack", out, tensors, backward)


def pad(a: ArrayLike, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` gives (before, after) per axis."""
    a = as_tensor(a)
    widths = tuple(tuple(w) for w in widths)
    if len(widths) != a.ndim:
        raise DimensionError(f"pad: {len(widths)} pad widths for shape {a.shape}")
    window = tuple(slice(lo, lo + extent) for (lo, _), extent in zip(widths, a.shape))
    return _result("pad", np.pad(a.data, widths), (a,), lambda g: (g[window],))
