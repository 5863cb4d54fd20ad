"""Reverse-mode tape: tensor-valued nodes, topological backward pass.

Nodes hold numpy buffers; ops live in `ops`. Graphs are single-use: build,
call backward(root) once, read .grad off the leaves. float32 by default,
float64 when leaves are created in check mode.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..errors import InvalidInputError

_ids = itertools.count()


class Node:
    """One value in the graph: a buffer plus how it was produced."""

    __slots__ = ("id", "op", "inputs", "value", "grad", "requires_grad", "_backward")

    def __init__(self, value, op="leaf", inputs=(), backward=None, requires_grad=False):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(n.requires_grad for n in self.inputs)
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def leaf(value, requires_grad: bool = False, dtype=None) -> Node:
    """Wrap an array as a graph input. dtype=None keeps float64 only if asked."""
    arr = np.asarray(value, dtype=dtype if dtype is not None else np.float32)
    return Node(arr, op="leaf", requires_grad=requires_grad)


def constant(value, like: Node | None = None) -> Node:
    """Non-trainable leaf, dtype matched to a reference node when given."""
    dtype = like.value.dtype if like is not None else np.float32
    return Node(np.asarray(value, dtype=dtype), op="const")


def topo_order(root: Node):
    """Inputs-before-outputs ordering of the subgraph reachable from root."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.inputs:
            if parent.id not in seen:
                stack.append((parent, False))
    return order


def accumulate(node: Node, g) -> None:
    """Add an incoming gradient to a node (no-op for non-differentiable nodes)."""
    if not node.requires_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def backward(root: Node) -> None:
    """Populate .grad over the graph; root must be a scalar."""
    if root.value.size != 1:
        raise InvalidInputError(f"backward root must be scalar, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.value)
    for node in reversed(topo_order(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
