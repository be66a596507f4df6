"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parent tensors and a closure mapping the upstream gradient to one
gradient per parent.  Tensors carry a monotonically increasing sequence
number, so the set of tensors reachable from a loss, sorted by descending
sequence number, is exactly the recorded tape replayed in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

_seq = itertools.count()
_state = threading.local()

PRECISIONS = {"float32": np.float32, "float64": np.float64, "32": np.float32, "64": np.float64}


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them for backward."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(mode):
    """Temporarily change the dtype used for newly created tensors.

    ``mode`` is ``"float32"``/``"32"`` (training default) or
    ``"float64"``/``"64"`` (finite-difference verification).
    """
    prev = default_dtype()
    _state.dtype = PRECISIONS[str(mode)]
    try:
        yield
    finally:
        _state.dtype = prev


def set_precision(mode):
    _state.dtype = PRECISIONS[str(mode)]


class Tensor:
    """A real array that may participate in the gradient tape.

    Feature maps use the (batch, channels, height, width) layout; generated
    kernels use higher ranks.  ``grad`` is populated by :func:`backward` on
    leaf tensors (and on any tensor that called :meth:`retain_grad`).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq", "_retain")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)
        self._retain = False

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

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def retain_grad(self):
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def make_result(data, parents, backward_fn, name=None):
    """Wrap ``data`` as the output of an operation.

    ``backward_fn(grad)`` must return one gradient (or ``None``) per parent.
    Nothing is recorded when gradients are disabled or no parent needs one.
    """
    out = Tensor(data, name=name, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _reachable(root):
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def backward(loss, retain_graph=False):
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Gradients accumulate additively: a tensor consumed twice receives the sum
    of both contributions, and repeated calls add into existing ``grad``.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing is on the tape")

    pending = {id(loss): np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
