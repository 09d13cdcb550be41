"""Dense tensors and the operation tape used for reverse-mode differentiation."""

import threading
from typing import Callable, List, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf values."""


class TapeError(RuntimeError):
    """Raised for misuse of a :class:`Tape` (non-scalar loss, replayed tape...)."""


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None and isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
        arr = np.asarray(data)
    else:
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


class Tensor:
    """A dense row-major array with an optional gradient.

    Float32 and float64 data are kept as-is; anything else is converted to
    float32. Values must be finite.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = _as_array(data, dtype)
        if not np.isfinite(arr).all():
            label = f" {name!r}" if name else ""
            raise NonFiniteError(f"non-finite values in tensor{label} of shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor carrying its own Adam moment accumulators."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _stack() -> List["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block on tensors
    that require gradients are recorded. ``backward`` replays the record in
    reverse and clears it, so a second call without a new forward pass fails.

    >>> w = Parameter([2.0])
    >>> with Tape() as tape:
    ...     y = ops.sum(ops.mul(w, w))
    >>> tape.backward(y)
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn):
        self.records.append(_Record(output, tuple(inputs), backward))

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise TapeError("tape is empty: run a forward pass before calling backward")
        if not any(r.output is loss for r in self.records):
            raise TapeError("loss was not produced on this tape")

        produced = {id(r.output) for r in self.records}
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise TapeError(f"gradient shape {g.shape} does not match input shape {inp.data.shape}")
                if id(inp) in produced:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = g if prev is None else prev + g
                else:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += g.astype(inp.data.dtype, copy=False)
        self.records.clear()


def needs_record(*inputs: Tensor) -> Optional[Tape]:
    tape = active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in inputs):
        return tape
    return None
