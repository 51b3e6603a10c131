"""Dense tensors with reverse-mode automatic differentiation.

Gradients are recorded on an explicit :class:`Tape`. Operations executed
while a tape is active (``with Tape():``) append one record each; walking the
records in reverse is a reverse-topological traversal because outputs are
always created after their inputs. Outside of a tape context everything runs
in plain inference mode with no recording.
"""

import threading

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    """The innermost active Tape, or None when recording is off."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float array, optionally carrying a gradient buffer.

    ``data`` is always a contiguous float32 or float64 numpy array. ``grad``
    stays None until a backward pass deposits into it; it accumulates across
    backward calls until cleared.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)


class Parameter:
    """Named trainable tensor. ``trainable=False`` freezes it: gradients are
    still computed and flow through, but an optimizer step must leave the
    value bit-identical."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name, value, trainable=True):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        self.name = name
        self.value = value
        self.trainable = bool(trainable)

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.value.shape)}, trainable={self.trainable})"


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations, replayed in reverse by
    :func:`backward`. One tape belongs to one thread/training loop; create a
    fresh one per iteration so intermediate buffers can be collected."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, output, inputs, backward_fn):
        output.requires_grad = True
        output._tape = self
        self.records.append(_Record(output, inputs, backward_fn))

    def __len__(self):
        return len(self.records)


def record_op(inputs, out_data, backward_fn):
    """Wrap an op result. Records onto the active tape when any input needs a
    gradient; otherwise returns a plain non-recorded tensor."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, tuple(inputs), backward_fn)
    return out


def backward(loss):
    """Populate .grad on every requires-grad leaf reachable from ``loss``.

    ``loss`` must be a scalar produced under a Tape. Each recorded operation
    is visited exactly once, in reverse execution order. Leaf gradients
    accumulate across calls; intermediate gradients are scratch state local
    to one call, so calling backward twice exactly doubles the leaf grads.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced under an active Tape")

    produced = {id(rec.output) for rec in tape.records}
    flow = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        gout = flow.pop(id(rec.output), None)
        if gout is None:
            continue
        gins = rec.backward_fn(gout)
        for t, g in zip(rec.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if id(t) in produced:
                acc = flow.get(id(t))
                flow[id(t)] = g if acc is None else acc + g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g
