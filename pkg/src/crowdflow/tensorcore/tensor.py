"""Reverse-mode automatic differentiation over dense 4-D arrays.

Every value is a ``Tensor`` holding a float64 array of shape
(batch, channel, height, width).  Operations record their parents and a
backward closure on the output, so the computation graph is the implicit
DAG of ``_parents`` links.  ``backward`` walks that DAG once in reverse
topological order and accumulates gradients into ``.grad``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "backward", "topological_order"]


class Tensor:
    """Dense 4-D array participating in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(
                f"tensor data must be 4-D (batch, channel, height, width), got shape {arr.shape}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Build an op output without re-copying data.

    The graph links are only kept when some parent needs gradients, so
    constant subexpressions are pruned eagerly.
    """
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes of the graph under ``root``, parents before children."""
    order: list[Tensor] = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        nxt = next(parents, None)
        if nxt is None:
            order.append(node)
            stack.pop()
        elif id(nxt) not in seen:
            seen.add(id(nxt))
            stack.append((nxt, iter(nxt._parents)))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``.grad`` for every reachable node.

    The loss must hold exactly one element.  Gradients add onto whatever is
    already in ``.grad``; callers reset parameter grads between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
