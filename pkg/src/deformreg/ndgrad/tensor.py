"""Dense tensors and the reverse-mode gradient tape.

Storage is float32 by default; float64 inputs are kept as float64 so that
numerical checks can run at higher precision. Reductions always accumulate
in float64 regardless of storage dtype.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ShapeError

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array, optionally tracked by the active Tape.

    ``data`` is immutable by convention once the tensor has entered a tape;
    ``grad`` is populated (as a same-shape array) by ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ndgrad.ops
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __sub__(self, other):
        from .ops import sub

        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    def __neg__(self):
        from .ops import scalar_mul

        return scalar_mul(self, -1.0)

    def __getitem__(self, key):
        from .ops import slice_

        return slice_(self, key)


def as_tensor(x, dtype=None):
    """Wrap ``x`` in a Tensor unless it already is one."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The innermost tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the differentiable ops of one forward pass.

    Ops append in execution order, which is topological by construction.
    ``backward`` replays the record once in reverse and then resets the
    tape, so a tape serves exactly one forward/backward cycle.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    @property
    def op_count(self):
        return len(self._nodes)

    def _record(self, out, inputs, grad_fn):
        self._nodes.append(_Node(out, inputs, grad_fn))

    def backward(self, out):
        """Populate ``grad`` on every requires_grad ancestor of ``out``.

        ``out`` must hold exactly one element. Gradients sum over fan-out.
        The tape is reset afterwards and cannot be replayed.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if not isinstance(out, Tensor):
            raise TypeError("backward expects a Tensor")
        if out.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {tuple(out.shape)}")
        out.grad = np.ones_like(out.data)
        for node in reversed(self._nodes):
            gy = node.out.grad
            if gy is None:
                continue
            gins = node.grad_fn(gy)
            for t, g in zip(node.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                # accumulation rebinds rather than mutates, so aliased
                # gradient arrays (e.g. both halves of add) stay valid
                if t.grad is None:
                    t.grad = np.asarray(g)
                else:
                    t.grad = t.grad + g
        self._consumed = True
        self._nodes = []


def backward(out, tape=None):
    """Run the backward pass of ``tape`` (or the active tape) from ``out``."""
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape supplied and no tape is active")
    tape.backward(out)


def record(data, inputs, grad_fn):
    """Create the output tensor of an op, recording it on the active tape.

    ``grad_fn(gy)`` must return one gradient array (or None) per input,
    in order. Without an active tape the op degrades to plain numpy.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape._record(out, tuple(inputs), grad_fn)
        return out
    return Tensor(data)
