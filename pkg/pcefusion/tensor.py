"""A minimal dense-tensor engine with reverse-mode automatic differentiation.

Every operation records a node on a per-thread :class:`ComputationGraph` (a tape) when one of its inputs requires
gradients. The tape is append-only, so insertion order is a valid topological order and :func:`backward` simply walks
it in reverse.
"""
import threading
from contextlib import contextmanager
from logging import getLogger
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from pcefusion.errors import ContractError, DegenerateMaskError, DimensionError, DomainError

logger = getLogger(__name__)

DTYPE = np.float64

Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """A dense n-dimensional array of 64-bit reals.

    Attributes:
        data (np.ndarray): The values, always C-contiguous float64.
        requires_grad (bool): If true, gradients are accumulated into ``grad`` by :func:`backward`.
        grad (np.ndarray, optional): The accumulated gradient, same shape as ``data``.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad: bool = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Tuple[int, int]] = None  # (graph generation, node index)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        """Return the value of a one-element tensor as a Python float."""
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Return a tensor sharing no history with this one."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"<Tensor, shape: {self.shape}, requires_grad: {self.requires_grad}>"

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)


class Node:
    """A record of one operation on the tape.

    Attributes:
        index (int): The position of this node on the tape.
        op (str): The kind of operation.
        inputs (List[Tensor]): The input tensors.
        output (Tensor): The output tensor.
        vjp (Callable): Maps the gradient of the output to the gradients of the inputs.
    """

    def __init__(self, index: int, op: str, inputs: List[Tensor], output: Tensor, vjp: Vjp):
        self.index: int = index
        self.op: str = op
        self.inputs: List[Tensor] = inputs
        self.output: Tensor = output
        self.vjp: Vjp = vjp

    def __repr__(self) -> str:
        return f"<Node, index: {self.index}, op: {self.op}, #inputs: {len(self.inputs)}>"


class ComputationGraph:
    """An append-only tape of operation records.

    A graph and the tensors recorded on it are confined to one thread. :meth:`clear` starts a new generation;
    tensors recorded on an earlier generation can no longer be differentiated.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.generation: int = 0
        self.enabled: bool = True

    def record(self, op: str, inputs: List[Tensor], output: Tensor, vjp: Vjp) -> None:
        node = Node(len(self.nodes), op, inputs, output, vjp)
        self.nodes.append(node)
        output._node = (self.generation, node.index)

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_graph() -> ComputationGraph:
    """Return the computation graph of the calling thread."""
    graph = getattr(_local, "graph", None)
    if graph is None:
        graph = _local.graph = ComputationGraph()
    return graph


def clear_graph() -> None:
    """Drop every node recorded by the calling thread."""
    get_graph().clear()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording within the block."""
    graph = get_graph()
    previous = graph.enabled
    graph.enabled = False
    try:
        yield
    finally:
        graph.enabled = previous


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, vjp: Vjp) -> Tensor:
    graph = get_graph()
    requires_grad = graph.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        graph.record(op, list(inputs), out, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf tensor ``t`` with ``requires_grad``.

    Repeated calls add to existing gradients; reset them with :meth:`Tensor.zero_grad` in between.

    Args:
        loss: A scalar (one-element) tensor.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("The loss does not depend on any tensor that requires gradients.")
        return
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        _accumulate(loss, seed)
        return

    graph = get_graph()
    generation, last = loss._node
    if generation != graph.generation:
        raise ContractError("the loss was recorded on a cleared computation graph")

    grads = {id(loss): seed}
    for node in reversed(graph.nodes[: last + 1]):
        grad = grads.pop(id(node.output), None)
        if grad is None:
            continue
        for inp, inp_grad in zip(node.inputs, node.vjp(grad)):
            if inp_grad is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                _accumulate(inp, inp_grad)
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + inp_grad
            else:
                grads[id(inp)] = inp_grad


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=DTYPE).reshape(t.shape)
    t.grad = grad.copy() if t.grad is None else t.grad + grad


# Elementwise arithmetic.


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    return _make(
        a.data + b.data, [a, b], "add", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    return _make(
        a.data - b.data, [a, b], "sub", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    return _make(
        a.data * b.data,
        [a, b],
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        [a, b],
        "div",
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, [a], "neg", lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, [a], "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of a nonpositive value (min {a.data.min()})")
    return _make(np.log(a.data), [a], "log", lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, [a], "square", lambda g: (2.0 * g * a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, [a], "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), [a], "softplus", lambda g: (g * _sigmoid(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _make(np.where(positive, a.data, 0.0), [a], "relu", lambda g: (g * positive,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows.
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def dropout(a, p: float, training: bool, seed: int = 0, op_index: int = 0) -> Tensor:
    """Zero each element with probability ``p`` and rescale survivors by ``1 / (1 - p)``.

    The mask is drawn from a counter-based generator keyed by ``(seed, op_index)``, so it depends on nothing but
    those two integers. In eval mode (``training=False``) this is the identity.
    """
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    rng = np.random.Generator(np.random.Philox(key=seed, counter=op_index))
    scale = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * scale, [a], "dropout", lambda g: (g * scale,))


class DropoutStream:
    """Hands out dropout op indices for one seed.

    Attributes:
        seed (int): The global seed.
        counter (int): The index handed to the next dropout op.
    """

    def __init__(self, seed: int):
        self.seed: int = seed
        self.counter: int = 0

    def __call__(self, a, p: float, training: bool) -> Tensor:
        if not training or p == 0.0:
            return as_tensor(a)
        self.counter += 1
        return dropout(a, p, training, seed=self.seed, op_index=self.counter)


# Linear algebra and shape manipulation.


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")

    def vjp(g):
        return (
            _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
        )

    return _make(np.matmul(a.data, b.data), [a, b], "matmul", vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), [a], "reshape", lambda g: (g.reshape(a.shape),))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), [a], "permute", lambda g: (np.transpose(g, inverse),))


def swap_last(a) -> Tensor:
    """Transpose the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), [a], "swap_last", lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(a.data[key], [a], "getitem", vjp)


def take(a, index) -> Tensor:
    """Gather rows of ``a`` (axis 0) with an integer index array of any shape.

    The output has shape ``index.shape + a.shape[1:]``.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (full,)

    return _make(a.data[index], [a], "take", vjp)


def scatter_add(a, index, size: int) -> Tensor:
    """Sum rows of ``a`` into ``size`` output rows: ``out[index[i]] += a[i]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:1]:
        raise DimensionError(f"scatter_add index shape {index.shape} does not match rows of {a.shape}")
    out = np.zeros((size,) + a.shape[1:], dtype=DTYPE)
    np.add.at(out, index, a.data)
    return _make(out, [a], "scatter_add", lambda g: (g[index],))


# Reductions.


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), [a], "sum", vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def masked_mean(a, mask, axis: int) -> Tensor:
    """Mean over the entries of ``a`` where ``mask`` is 1, along ``axis``.

    ``mask`` must broadcast against ``a`` and hold at least one 1 along ``axis`` everywhere.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=DTYPE)
    if np.any((mask != 0) & (mask != 1)):
        raise ContractError("mask must contain only 0 and 1")
    counts = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, a.shape)).sum(axis=axis, keepdims=True)
    if np.any(counts == 0):
        raise DegenerateMaskError(f"mask is all zero along axis {axis}")
    return sum(a * Tensor(mask), axis=axis) / Tensor(np.squeeze(counts, axis=axis))


# Normalization and attention primitives.


def softmax(a, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction.

    Entries where ``mask`` is 0 get logit -inf and hence exactly zero weight.
    """
    a = as_tensor(a)
    logits = a.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not np.all(keep.any(axis=axis)):
            raise DegenerateMaskError("every key is masked in at least one softmax row")
        logits = np.where(keep, logits, -np.inf)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, [a], "softmax", lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def softmax_rows(a, mask=None) -> Tensor:
    """Row-wise softmax of a matrix."""
    return softmax(a, mask=mask, axis=-1)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply ``gain`` and ``bias``."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: input {a.shape} with gain {gain.shape} and bias {bias.shape}")
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    lead = tuple(range(a.ndim - 1))

    def vjp(g):
        g_hat = g * gain.data
        grad_a = inv_std * (
            g_hat - g_hat.mean(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_a, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return _make(x_hat * gain.data + bias.data, [a, gain, bias], "layer_norm", vjp)
