"""Dense tensors with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a backward rule mapping the upstream gradient to one gradient per
parent.  :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.  Gradients of intermediate nodes live only for the duration
of one ``backward`` call; leaves accumulate into ``.grad`` until
:meth:`Tensor.zero_grad` is called.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_debug = os.environ.get("MCSEG_DEBUG", "") not in ("", "0")


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Check every op output for NaN/Inf while active."""
    global _debug
    prev = _debug
    _debug = enabled
    try:
        yield
    finally:
        _debug = prev


def is_debug():
    return _debug


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._prev = ()
        self._backward = None
        self._op = ""

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        if _debug and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._prev = tuple(parents)
            out._backward = backward
        else:
            out._prev = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- reverse pass ---------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(as_tensor(other, like=self), ops.neg(self))

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, ops.reciprocal(other))
        return ops.mul(self, 1.0 / other)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis=axis)


def _not_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _topological_order(root):
    order = []
    seen = set()
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
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def tape(root):
    """Recorded nodes reachable from ``root``, inputs before outputs."""
    return _topological_order(root)
