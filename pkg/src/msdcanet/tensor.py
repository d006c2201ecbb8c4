"""Dense N-D tensors with reverse-mode automatic differentiation.

Image tensors use N x C x H x W layout, row-major, float32 by default
(float64 for the gradient-check suite). Differentiable operators record
onto an explicit :class:`Tape`:

    with Tape() as tape:
        y = some_ops(x)
        loss = more_ops(y)
    tape.backward(loss)          # populates .grad on everything reachable

Running an operator with no active tape skips graph construction entirely,
which is the inference path. A tape can be consumed by exactly one backward
pass; gradients accumulate additively across fan-out and are never mutated
in place, so aliased gradient arrays are safe.

Custom operators plug in through :func:`recording_tape` /
:func:`accumulate_grad` / :meth:`Tape.record`; see msdcanet.ops for the
pattern.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from math import prod

import numpy as np

DEFAULT_DTYPE = np.float32


class TapeError(RuntimeError):
    """Misuse of the recording/backward protocol."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class Tensor:
    """N-D float array with an optional gradient slot.

    ``data`` is a float32/float64 ndarray; ``grad`` is either None or an
    ndarray of identical shape, populated by :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# creation


def _checked_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape needs at least one extent")
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    return shape


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(_checked_shape(shape), dtype=dtype), requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(_checked_shape(shape), dtype=dtype), requires_grad)


def uniform(shape, seed, low=0.0, high=1.0, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    shape = _checked_shape(shape)
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(low, high, shape).astype(dtype), requires_grad)


def kaiming(shape, seed, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    """He-normal init: std = sqrt(2 / fan_in), fan_in = prod(shape[1:])."""
    shape = _checked_shape(shape)
    fan_in = prod(shape[1:]) if len(shape) > 1 else shape[0]
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype), requires_grad)


def create(shape, init="zeros", seed=None, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    """Generic constructor: init is one of zeros|ones|uniform|kaiming."""
    if init == "zeros":
        return zeros(shape, dtype, requires_grad)
    if init == "ones":
        return ones(shape, dtype, requires_grad)
    if init == "uniform":
        return uniform(shape, seed, dtype=dtype, requires_grad=requires_grad)
    if init == "kaiming":
        return kaiming(shape, seed, dtype=dtype, requires_grad=requires_grad)
    raise ValueError(f"unknown init {init!r}")


def assert_finite(arr, what: str) -> None:
    data = arr.data if isinstance(arr, Tensor) else arr
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# tape

_tls = threading.local()


def _stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


class Tape:
    """Ordered record of one forward pass's differentiable operations."""

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, backward_fn) -> None:
        """Append an executed op; backward_fn(gy) accumulates input grads."""
        self._entries.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; one sweep per recorded pass."""
        if self._consumed:
            raise TapeError("tape already consumed by a backward pass; record a new forward pass")
        if loss.size != 1:
            raise ValueError(f"backward needs a single-element loss, got shape {tuple(loss.shape)}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._entries):
            gy = out.grad
            if gy is not None:
                fn(gy)
        self._entries.clear()


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def recording_tape(*tensors) -> Tape | None:
    """The active tape if any argument tensor participates in gradients."""
    tape = active_tape()
    if tape is None:
        return None
    for t in tensors:
        if isinstance(t, Tensor) and t.requires_grad:
            return tape
    return None


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Additive accumulation; rebinds instead of mutating, so views are safe."""
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run the active tape's backward sweep from a scalar loss."""
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape; wrap the forward pass in `with Tape() as t:`")
    tape.backward(loss)


# ---------------------------------------------------------------------------
# FLOP accounting (used by estimate_flops; forward cost only)


@contextmanager
def count_flops():
    """Context manager yielding a counter; ops add their forward FLOPs."""
    counter = _FlopCounter()
    prev = getattr(_tls, "flops", None)
    _tls.flops = counter
    try:
        yield counter
    finally:
        _tls.flops = prev


class _FlopCounter:
    __slots__ = ("total",)

    def __init__(self):
        self.total = 0


def add_flops(n: int) -> None:
    counter = getattr(_tls, "flops", None)
    if counter is not None:
        counter.total += int(n)
