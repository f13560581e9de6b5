"""Minimal reverse-mode automatic differentiation.

A Var wraps a float64 ndarray and lazily accumulates its gradient.  Ops
append one backward closure per forward call to the Tape; backward()
replays the closures once each, in reverse execution order (which is a
reverse topological order of the recorded graph).  Passing tape=None to
any op disables recording and turns it into a plain forward computation.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ShapeError


class Var:
    """A differentiable value: float64 ndarray plus accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class Tape:
    """Backward closures recorded in forward order."""

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._steps)

    def record(self, step: Callable[[], None]) -> None:
        self._steps.append(step)

    def backward(self, out: Var) -> None:
        """Seed d(out)/d(out) = 1 and replay every recorded op exactly once."""
        if out.value.shape != ():
            raise ShapeError(f"backward target must be scalar, got shape {out.value.shape}")
        out.accumulate(np.asarray(1.0))
        for step in reversed(self._steps):
            step()
