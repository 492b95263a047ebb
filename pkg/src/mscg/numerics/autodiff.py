"""Reverse-mode differentiation over numpy arrays.

A ``Var`` pairs a value array with gradient storage, its parent nodes and the
closure that maps an upstream gradient onto the parents. Ops live in
:mod:`mscg.numerics.ops`; this module only knows how to build and walk graphs.
"""
from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """An op was called with arguments that violate its shape or domain contract."""


class Var:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name", "_grad", "op")
    # make ``ndarray <op> Var`` dispatch to the reflected Var operator
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None, op=None):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.op}" if self.op else ""
        return f"Var({self.value!r}{tag}, requires_grad={self.requires_grad})"

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def param(value, name=None) -> Var:
    """Leaf node that collects gradients."""
    return Var(np.array(value), requires_grad=True, name=name)


def as_var(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype and (arr.dtype.kind in "fiub"):
        arr = arr.astype(dtype)
    return Var(arr)


def make(value, parents, backward_fn, op=None) -> Var:
    """Create an op output; graph edges are kept only if some parent needs grads."""
    if any(p.requires_grad for p in parents):
        return Var(value, parents, backward_fn, requires_grad=True, op=op)
    return Var(value, op=op)


def _topo_order(root: Var) -> list[Var]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Gradients add onto whatever is already stored, so call ``zero_grad`` on the
    leaves between independent passes.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._grad = g.copy() if node._grad is None else node._grad + g
        if node.backward_fn is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = pending.get(id(p))
            pending[id(p)] = pg if prev is None else prev + pg
