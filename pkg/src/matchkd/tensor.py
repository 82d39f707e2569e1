"""Dense float64 tensors with a per-pass gradient tape.

Every differentiable op records a node on the currently active Tape; a tape
lives for one forward pass and is discarded by backward(). Gradients are
plain numpy arrays accumulated in place on the tensors that requested them.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable

import numpy as np

__all__ = ["Tensor", "Tape", "no_grad", "backward", "active_tape", "grad_enabled"]

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording for the enclosed region."""
    previous = grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


class Tensor:
    """A dense float64 array, optionally carrying a gradient accumulator."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no gradient history."""
        return Tensor(self.values)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar delegates to ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class _Node:
    __slots__ = ("output", "backward_fn")

    def __init__(self, output: Tensor, backward_fn: Callable):
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of one forward pass. Use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def record(self, output: Tensor, backward_fn: Callable) -> None:
        output.requires_grad = True
        output.grad = np.zeros_like(output.values)
        output._tape = self
        self.nodes.append(_Node(output, backward_fn))


def maybe_record(output: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Record output on the active tape if grads are enabled and needed."""
    tape = active_tape()
    if (
        tape is not None
        and not tape.consumed
        and grad_enabled()
        and any(t.requires_grad for t in inputs)
    ):
        tape.record(output, backward_fn)
    return output


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; consumes and clears its tape."""
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # A leaf scalar has no history; its own gradient is just seeded.
        if loss.requires_grad:
            loss.grad += 1.0
        return
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.consumed = True
    loss.grad += 1.0
    for node in reversed(tape.nodes):
        node.backward_fn(node.output.grad)
    tape.nodes.clear()
