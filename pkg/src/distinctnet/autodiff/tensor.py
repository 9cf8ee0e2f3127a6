"""Reverse-mode automatic differentiation on numpy arrays.

A DTensor wraps an ndarray together with a lazily allocated gradient buffer
and the closure needed to push an incoming gradient to its parents. Graphs
are built eagerly by the op functions in ops.py and are torn down by normal
garbage collection once the loss tensor goes out of scope.

Conventions:
  * no op ever mutates the ``data`` array of one of its inputs;
  * gradients accumulate (+=) so a tensor used twice receives both paths;
  * graph recording is skipped entirely when no input requires a gradient
    or when inside a ``no_grad()`` block, which makes inference cheap.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional

import numpy as np

from ..errors import UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / timing)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class DTensor:
    """N-dimensional differentiable array: values plus gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "trainable", "name",
                 "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        # trainable is only consulted by the optimizer; freezing a parameter
        # clears both flags so backward skips the frozen subgraph entirely
        self.trainable = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._grad_owned = False

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DTensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # -- gradient plumbing -------------------------------------------------
    def accumulate_grad(self, g: np.ndarray) -> None:
        # first accumulation stores a reference (producers hand over fresh
        # arrays and never mutate them afterwards); a second accumulation
        # materializes an owned sum so the shared buffer stays intact
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def detach(self) -> "DTensor":
        """Same values, cut off from the graph."""
        return DTensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse sweep from this tensor; populates .grad on every
        requires_grad tensor reachable through the graph."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(
                    f"backward() without an explicit gradient needs a scalar, "
                    f"got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # python niceties used by tests / demos
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


def _topo_order(root: DTensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def make_node(out_data: np.ndarray, parents: Iterable[DTensor],
              backward: Callable[[np.ndarray], None]) -> DTensor:
    """Wrap an op result; records the graph edge only when it matters."""
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = DTensor(out_data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def as_dtensor(x, like: Optional[DTensor] = None) -> DTensor:
    if isinstance(x, DTensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return DTensor(np.asarray(x, dtype=dtype))


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g
