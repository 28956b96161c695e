"""Dense tensors with a gradient slot.

Activations and parameters are plain contiguous numpy arrays wrapped in a
small ``Tensor`` holder.  The layer set is closed (see ``layers``), so there
is no taped graph: each layer owns its forward cache and backward rule.
"""

from __future__ import annotations

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64


def resolve_dtype(precision) -> np.dtype:
    """Map a precision tag ('float32'/'float64' or a numpy dtype) to a dtype."""
    if precision in ("float32", "f32", FLOAT32, np.dtype(np.float32)):
        return np.dtype(np.float32)
    if precision in ("float64", "f64", FLOAT64, np.dtype(np.float64)):
        return np.dtype(np.float64)
    raise ValueError(f"unsupported precision {precision!r}")


class Tensor:
    """A dense n-dimensional array plus an optional same-shape gradient.

    ``data`` is always C-contiguous.  ``grad`` is lazily allocated; it is
    filled by layer backward passes and consumed by the optimizer.
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.ascontiguousarray(data)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def set_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter shape "
                f"{self.data.shape} for {self.name or 'tensor'}"
            )
        self.grad = g

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.set_grad(np.array(g, copy=True))
        else:
            self.grad += g

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), name=self.name)
        if self.grad is not None:
            t.grad = self.grad.astype(dtype)
        return t

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
