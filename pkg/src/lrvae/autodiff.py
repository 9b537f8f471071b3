"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The graph is built on the fly (define-by-run): every operation returns a new
:class:`Tensor` holding references to its parents and a closure that pushes
the upstream gradient back to them.  ``backward`` walks the graph in reverse
topological order and sums contributions from multiple consumers.

Only what the models in this package need is provided: dense layers, ReLU,
elementwise arithmetic, reductions, a fused softmax cross-entropy and the
gradient reversal layer.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "as_tensor",
    "parameter",
    "forward_dense",
    "relu",
    "exp",
    "tanh",
    "square",
    "tensor_sum",
    "tensor_mean",
    "softmax_cross_entropy",
    "gradient_reversal",
    "backward",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    ``data`` is never modified in place by any operation here; optimizers
    rebind it.  ``grad`` is the accumulator filled by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        arr = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # arithmetic -------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data + other.data
        a, b = self, other

        def _bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return _make(out_data, "add", (a, b), _bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def _bw(g: np.ndarray) -> None:
            a._accumulate(-g)

        return _make(-self.data, "neg", (a,), _bw)

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data * other.data
        a, b = self, other

        def _bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return _make(out_data, "mul", (a, b), _bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant instead")
        return self * (1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul shapes do not conform: {self.shape} @ {other.shape}")
        a, b = self, other

        def _bw(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return _make(self.data @ other.data, "matmul", (a, b), _bw)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def _make(data, op: str, parents: tuple[Tensor, ...], bw) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, op=op, parents=parents if needs else (), backward_fn=bw if needs else None)


def as_tensor(value) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def forward_dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights + bias`` fused into one node."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if (
        x.data.ndim != 2
        or weights.data.ndim != 2
        or bias.data.ndim != 1
        or x.shape[1] != weights.shape[0]
        or weights.shape[1] != bias.shape[0]
    ):
        raise DimensionError(
            f"dense shapes do not conform: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )

    def _bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ weights.data.T)
        if weights.requires_grad:
            weights._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(x.data @ weights.data + bias.data, "dense", (x, weights, bias), _bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    on = x.data > 0

    def _bw(g: np.ndarray) -> None:
        x._accumulate(g * on)

    return _make(np.where(on, x.data, 0.0), "relu", (x,), _bw)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def _bw(g: np.ndarray) -> None:
        x._accumulate(g * out)

    return _make(out, "exp", (x,), _bw)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def _bw(g: np.ndarray) -> None:
        x._accumulate(g * (1.0 - out * out))

    return _make(out, "tanh", (x,), _bw)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def _bw(g: np.ndarray) -> None:
        x._accumulate(2.0 * g * x.data)

    return _make(x.data * x.data, "square", (x,), _bw)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)

    def _bw(g: np.ndarray) -> None:
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(x.data.sum(axis=axis), "sum", (x,), _bw)


def tensor_mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return tensor_sum(x) * (1.0 / x.data.size)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``.

    Softmax and log are fused with max subtraction; the gradient is
    ``(softmax - onehot) / B``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits batch {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise IndexError(f"label {int(bad)} out of range for {c} classes")
    labels = labels.astype(np.int64)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))

    def _bw(g: np.ndarray) -> None:
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, labels] -= 1.0
        logits._accumulate(probs * (float(g) / n))

    return _make(np.array(loss), "softmax_xent", (logits,), _bw)


def gradient_reversal(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lam`` backward."""
    x = as_tensor(x)
    lam = float(lam)
    if not np.isfinite(lam):
        raise ValueError(f"reversal strength must be finite, got {lam}")

    def _bw(g: np.ndarray) -> None:
        x._accumulate(-lam * g)

    return _make(x.data, "grad_reverse", (x,), _bw)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``root``.

    Leaf gradients accumulate into ``.grad`` (call ``zero_grad`` between
    steps).  Returns a map from each reachable trainable leaf to its gradient.
    """
    if root.data.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    interior = [n for n in order if n._backward is not None]
    # interior accumulators start fresh on every call
    for node in interior:
        node.grad = None
    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {n: n.grad for n in order if n._backward is None and n.requires_grad and n.grad is not None}


def iter_leaves(root: Tensor) -> Iterable[Tensor]:
    """Trainable leaves reachable from ``root``; used in tests."""
    return [n for n in _topological_order(root) if n._backward is None and n.requires_grad]
