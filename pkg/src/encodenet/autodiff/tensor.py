"""Tensor value type and the computation tape used for reverse-mode AD.

Operations record themselves on the innermost active :class:`Tape`. When no
tape is active nothing is recorded, which is how inference runs without
building a graph::

    with Tape() as tape:
        loss = F.mse(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import NumericError, ShapeError, TapeError

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision. Intended for gradient checks."""
    previous = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(data, what):
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """Dense float array with an optional gradient buffer.

    ``data`` is always a numpy array of the current default precision
    (float32 unless inside :func:`float64_mode`).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @classmethod
    def _wrap(cls, arr, op):
        # Op outputs: skip the defensive copy, keep the finiteness check.
        _check_finite(arr, op)
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

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
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the functional module holds the actual definitions.
    def __add__(self, other):
        from .functional import add

        return add(self, other)

    def __radd__(self, other):
        from .functional import add

        return add(other, self)

    def __sub__(self, other):
        from .functional import sub

        return sub(self, other)

    def __mul__(self, other):
        from .functional import mul

        return mul(self, other)

    def __rmul__(self, other):
        from .functional import mul

        return mul(other, self)

    def sum(self):
        from .functional import sum as _sum

        return _sum(self)

    def mean(self):
        from .functional import mean

        return mean(self)

    def reshape(self, *shape):
        from .functional import reshape

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record(out_data, parents, backward, op):
    """Wrap ``out_data`` as an op output and put it on the active tape.

    ``backward`` maps the output gradient to a tuple with one entry per
    parent (``None`` where the parent needs no gradient).
    """
    out = Tensor._wrap(out_data, op)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape._push(out)
    return out


class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so the list is already a
    topological order; :meth:`backward` replays it in reverse exactly once.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._ids = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def _push(self, node):
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already run backward")
        self.nodes.append(node)
        self._ids.add(id(node))

    def reset(self):
        self.nodes = []
        self._ids = set()
        self.consumed = False

    def backward(self, loss):
        """Populate ``.grad`` on every leaf reachable from ``loss``.

        Leaf gradients accumulate (``+=``) so several tapes can contribute
        before an optimizer step.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._ids:
            raise TapeError("loss was not recorded on this tape")
        _check_finite(loss.data, "loss")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"{node._op}: gradient shape {pg.shape} != input shape {parent.data.shape}"
                    )
                if parent.is_leaf:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=parent.data.dtype)
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        self.nodes = []
        self._ids = set()


def backward(loss, tape):
    tape.backward(loss)
