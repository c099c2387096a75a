"""Reverse-mode automatic differentiation over dense numpy buffers.

Float32 is the working precision for training and inference. Float64 is
accepted too so gradient checks can run with enough headroom for finite
differences; build the parameters with dtype=np.float64 for a check run.

Every operation validates that its result is finite: NaN or Inf anywhere
is treated as a hard error, not a value to propagate.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_ALLOWED_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction on inference paths."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled():
    return _grad_enabled


def _ensure_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A dense float array plus the bookkeeping for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _ALLOWED_DTYPES else np.float32
        elif np.dtype(dtype) not in _ALLOWED_DTYPES:
            raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        _ensure_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # ---- basic introspection -------------------------------------------------

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

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    # ---- autograd ------------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar root, accumulating into .grad fields."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar root")
        order = _toposort(self)
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad += np.ones_like(self.data)
        for node in order:
            fn = node._backward_fn
            if fn is not None and node.grad is not None:
                fn(node.grad)
                # internal activations do not need to keep their gradient
                if node._parents:
                    node.grad = None

    # ---- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _scalar_affine(self, 1.0, float(other))

    __radd__ = __add__

    def __neg__(self):
        return _scalar_affine(self, -1.0, 0.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, _scalar_affine(other, -1.0, 0.0))
        return _scalar_affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return _scalar_affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _scalar_affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not part of the operator set")
        return _scalar_affine(self, 1.0 / float(other), 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return _reduce(self, "sum")

    def mean(self):
        return _reduce(self, "mean")

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def _toposort(root):
    """Reverse topological order of the graph below ``root`` (iterative DFS)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    order.reverse()
    return order


def _acc(tensor, grad):
    """Accumulate ``grad`` into ``tensor.grad`` (gradients always add)."""
    if grad.shape != tensor.data.shape:
        grad = grad.reshape(tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad += grad


def node(data, parents, backward_fn, what="op result"):
    """Wrap an op result into a Tensor, recording the graph edge if tracking."""
    _ensure_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward_fn = backward_fn if track else None
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_same_dtype(a, b):
    if a.data.dtype != b.data.dtype:
        raise ContractError(
            f"mixed dtypes {a.data.dtype.name}/{b.data.dtype.name}; cast explicitly"
        )


# ---- primitive ops ------------------------------------------------------------


def add(a, b):
    _check_same_dtype(a, b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return node(data, (a, b), bwd, "add")


def mul(a, b):
    _check_same_dtype(a, b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return node(data, (a, b), bwd, "mul")


def _scalar_affine(a, scale, shift):
    data = a.data * a.data.dtype.type(scale)
    if shift != 0.0:
        data = data + a.data.dtype.type(shift)

    def bwd(g):
        if a.requires_grad:
            _acc(a, g * a.data.dtype.type(scale))

    return node(data, (a,), bwd, "scalar op")


def matmul(a, b):
    """Matrix product; batched when either operand has more than 2 dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul expects at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    _check_same_dtype(a, b)
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            _acc(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            _acc(b, _unbroadcast(gb, b.data.shape))

    return node(data, (a, b), bwd, "matmul")


def _reduce(a, kind):
    if kind == "sum":
        data = a.data.sum(dtype=a.data.dtype)
        scale = 1.0
    else:
        data = a.data.mean(dtype=a.data.dtype)
        scale = 1.0 / a.data.size
    data = np.asarray(data, dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            _acc(a, np.full_like(a.data, g.reshape(()) * a.data.dtype.type(scale)))

    return node(data, (a,), bwd, kind)


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g):
        if a.requires_grad:
            _acc(a, g.reshape(orig))

    return node(data, (a,), bwd, "reshape")


def transpose(a, *axes):
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(g.transpose(inverse)))

    return node(data, (a,), bwd, "transpose")


def concat(tensors, axis=1):
    if not tensors:
        raise ContractError("concat of zero tensors")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, start + size)
                _acc(t, g[tuple(index)])
            start += size

    return node(data, tuple(tensors), bwd, "concat")


def mse(a, b):
    """Mean squared error as an autograd scalar."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mse shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = add(a, _scalar_affine(b, -1.0, 0.0))
    return _reduce(mul(diff, diff), "mean")
