"""Dense float64 tensors and the reverse-mode tape.

A ``Tensor`` wraps a numpy array (always float64, at most 5 axes).  A
``Tape`` records the primitive operations applied to tensors attached to it;
replaying the recorded adjoint functions in reverse order accumulates
gradients into every attached tensor.  Tensors without a tape behave as
constants and cost nothing extra in eval paths.

A tape is single-threaded: one forward/backward pass owns it exclusively.
Distinct tapes are independent and may live on distinct threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ValidationError

MAX_AXES = 5


class Tensor:
    """A dense, row-major, double-precision value, optionally tape-attached."""

    __slots__ = ("data", "grad", "tape", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ValidationError(f"tensor rank {arr.ndim} exceeds the {MAX_AXES}-axis limit")
        if any(n < 1 for n in arr.shape):
            raise ValidationError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name
        if tape is not None:
            tape._track(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


class Tape:
    """Ordered record of primitive operations with gradient accumulators.

    Usage::

        with Tape() as tape:
            for p in params:
                tape.watch(p)
            loss = some_scalar_function(params)
            tape.backward(loss)
        # p.grad now holds d(loss)/dp for every watched parameter

    ``backward`` resets every accumulator to zero (represented as ``None``)
    before replaying, so a tape can be reused for several passes.  Exiting
    the ``with`` block detaches all tensors so later forward passes record
    nothing.
    """

    __slots__ = ("_records", "_tensors", "_ids")

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._tensors: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.detach_all()

    def _track(self, t: Tensor) -> None:
        if id(t) not in self._ids:
            self._ids.add(id(t))
            self._tensors.append(t)

    def watch(self, t: Tensor) -> Tensor:
        """Attach a tensor so gradients accumulate into it."""
        t.tape = self
        self._track(t)
        return t

    def record(self, backward: Callable[[], None], out: Tensor, inputs: Sequence[Tensor] = ()) -> None:
        """Append one primitive's adjoint. Called by the ops module."""
        out.tape = self
        self._track(out)
        for t in inputs:
            self._track(t)
        self._records.append(backward)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/dt into every attached tensor's ``grad``."""
        if loss.tape is not self:
            raise ValidationError("loss tensor is not attached to this tape")
        if loss.size != 1:
            raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
        for t in self._tensors:
            t.grad = None
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()

    def detach_all(self) -> None:
        for t in self._tensors:
            t.tape = None

    def __len__(self) -> int:
        return len(self._records)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add an adjoint contribution into a tensor's accumulator.

    Ownership contract: the first contribution is adopted as the
    accumulator without copying, so callers must hand over a writable
    buffer that no other tensor will read after this record runs (an
    output's grad is dead once its producing record has replayed).  Pass a
    copy when the same buffer goes to two tensors.
    """
    if t.tape is None:
        return
    if t.grad is None:
        if not g.flags.writeable or g.dtype != np.float64:
            g = np.array(g, dtype=np.float64)
        t.grad = g
    else:
        t.grad += g


def active_tape(*tensors) -> "Tape | None":
    """The shared tape of the given tensors, or None if all are constants."""
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValidationError("operands belong to different tapes")
    return tape
