"""
Define-by-run reverse-mode automatic differentiation over numpy arrays.

Operations executed inside a ``with Graph() as graph:`` block are appended to
the graph's tape whenever one of their inputs requires a gradient. Outside a
graph nothing is recorded, which is how inference runs.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Graph() as graph:
    ...     loss = (x * x).sum()
    >>> backward(loss, graph)
    >>> x.grad
    array([2., 4.])
"""
import logging
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


def _graph_stack() -> List["Graph"]:
    if not hasattr(_local, "stack"):
        _local.stack = list()
    return _local.stack


def current_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor(object):
    """Dense float64 array with optional gradient participation."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph(object):
    """Ordered tape of executed differentiable operations.

    Nodes are appended as operations run, so the tape is already in
    topological order. A graph is confined to the thread that built it.
    """

    def __init__(self):
        self.nodes: List[Tuple[Tensor, Tuple[Tensor, ...], BackwardFn]] = list()
        self.watched: List[Tensor] = list()

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        popped = _graph_stack().pop()
        assert popped is self

    def __len__(self):
        return len(self.nodes)

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves that must receive a gradient even if the loss never touches them."""
        for t in tensors:
            if t.requires_grad and not any(t is w for w in self.watched):
                self.watched.append(t)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        self.nodes.append((output, inputs, backward_fn))

    def leaves(self) -> List[Tensor]:
        produced = {id(out) for out, _, _ in self.nodes}
        seen = set()
        out = list()
        for _, inputs, _ in self.nodes:
            for t in inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        for t in self.watched:
            if id(t) not in produced and id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        return out


def record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a primitive and tape it when needed."""
    inputs = tuple(inputs)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    graph = current_graph()
    if requires_grad and graph is not None:
        graph.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, graph: Optional[Graph] = None, inputs: Sequence[Tensor] = ()) -> List[Tensor]:
    """Populate ``grad`` of every leaf of ``graph`` with d(loss)/d(leaf).

    ``inputs`` are watched on top of the recorded leaves. Gradients accumulate
    additively into existing ``grad`` buffers. Leaves the loss does not depend
    on receive zeros, including when the loss is a constant and the tape is
    empty. Returns the populated leaves.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else current_graph()
    if graph is None:
        raise RuntimeError("backward called without a recorded graph")
    graph.watch(*inputs)

    grads = {id(loss): np.ones_like(loss.data)}
    for output, node_inputs, backward_fn in reversed(graph.nodes):
        g_out = grads.pop(id(output), None)
        if g_out is None:
            continue
        input_grads = backward_fn(g_out)
        assert len(input_grads) == len(node_inputs)
        for t, g in zip(node_inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            assert g.shape == t.shape, f"gradient shape {g.shape} != tensor shape {t.shape}"
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + g
            else:
                grads[id(t)] = g

    leaves = graph.leaves()
    if loss.requires_grad and not any(loss is out for out, _, _ in graph.nodes) and loss not in leaves:
        leaves.append(loss)
    for leaf in leaves:
        g = grads.get(id(leaf), np.zeros_like(leaf.data))
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------
#   Elementwise ops
# ------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape))
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data / b.data, (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * a.data / (b.data ** 2), b.shape))
    )


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return record(x.data ** 2, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def _backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0)
        return (gx,)

    return record(out, (x,), _backward)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


# ------------------
#   Linear algebra
# ------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record(a.data @ b.data, (a, b), _backward)


# ------------------
#   Reductions
# ------------------

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if not keepdims else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return record(out, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),))


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1)
    return record(out, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,))


def norm(x: ArrayLike, axis=None) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at a zero norm is zero."""
    x = as_tensor(x)
    out = np.sqrt((x.data ** 2).sum(axis=axis))

    def _backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (x.data * _expand_reduced(scale, x.shape, axis, keepdims=False),)

    return record(out, (x,), _backward)


# ------------------
#   Shape ops
# ------------------

def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: ArrayLike, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    a, b = a % x.ndim, b % x.ndim
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def _scatter(values: np.ndarray, indices: np.ndarray, axis: int, length: int) -> np.ndarray:
    """Add ``values`` (index dims at ``axis``) into a new axis of ``length``."""
    k = indices.ndim
    moved = np.moveaxis(values, list(range(axis, axis + k)), list(range(k)))
    out = np.zeros((length,) + moved.shape[k:], dtype=values.dtype)
    np.add.at(out, indices, moved)
    return np.moveaxis(out, 0, axis)


def take(x: ArrayLike, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; the axis is replaced by ``indices.shape``."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    return record(
        np.take(x.data, indices, axis=axis), (x,),
        lambda g: (_scatter(g, indices, axis, x.shape[axis]),)
    )


def scatter_add(x: ArrayLike, indices: np.ndarray, axis: int, length: int) -> Tensor:
    """Transpose of :func:`take`: the ``indices.ndim`` axes starting at ``axis``
    are summed into one axis of size ``length``."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    if x.shape[axis:axis + indices.ndim] != indices.shape:
        raise ValueError(f"scatter_add: indices {indices.shape} do not match axes of {x.shape} at {axis}")
    return record(
        _scatter(x.data, indices, axis, length), (x,),
        lambda g: (np.take(g, indices, axis=axis),)
    )
