"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (the value) plus an optional gradient
buffer of the same shape.  Operations in :mod:`pocketcnn.ops` record backward
closures onto the active :class:`Tape`; ``Tape.backward`` replays them in
exact reverse execution order, accumulating (``+=``) gradients so that
fan-out is handled correctly.

Training runs in float32, gradient checks in float64.  Both dtypes are
supported uniformly.
"""

from __future__ import annotations

import ctypes
import gc
import threading
import weakref

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "active_tape",
    "allocation_tracker",
    "AllocationTracker",
    "save_npy",
    "load_npy",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


# Keep large freed blocks on the heap so per-step activation buffers are
# reused instead of being mmap'd and unmapped on every training step.
try:  # pragma: no cover - best effort, glibc only
    ctypes.CDLL("libc.so.6").mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
except OSError:
    pass


class AllocationTracker:
    """High-water-mark accounting of live tensor buffer bytes.

    Only buffers created while the tracker is active are counted.  Releases
    are registered through ``weakref.finalize`` so the count drops as soon
    as a tensor is garbage collected (prompt under CPython refcounting).
    In debug mode a shadow set of live tensors allows an independent
    cross-check of the running total.
    """

    def __init__(self):
        self.enabled = False
        self.debug = False
        self.current = 0
        self.peak = 0
        self._shadow: weakref.WeakSet = weakref.WeakSet()

    def activate(self, debug: bool = False) -> None:
        self.enabled = True
        self.debug = debug
        self.current = 0
        self.peak = 0
        self._shadow = weakref.WeakSet()

    def deactivate(self) -> None:
        self.enabled = False
        self.debug = False

    def reset_peak(self) -> None:
        self.peak = self.current

    def note(self, owner: "Tensor", nbytes: int) -> None:
        if not self.enabled:
            return
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current
        weakref.finalize(owner, self._release, nbytes)
        if self.debug:
            self._shadow.add(owner)

    def _release(self, nbytes: int) -> None:
        self.current -= nbytes

    def shadow_live_bytes(self) -> int:
        """Independent recount of live tracked buffers (debug mode only)."""
        gc.collect()
        total = 0
        for t in list(self._shadow):
            total += t.data.nbytes
            if t.grad is not None:
                total += t.grad.nbytes
        return total


_TRACKER = AllocationTracker()


def allocation_tracker() -> AllocationTracker:
    return _TRACKER


class Tensor:
    """N-d array with value storage and an optional same-shape gradient."""

    __slots__ = ("data", "grad", "__weakref__")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        _TRACKER.note(self, arr.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
            _TRACKER.note(self, self.grad.nbytes)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={'yes' if self.grad is not None else 'no'})"


_LOCAL = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of executed ops, replayed in reverse for backward.

    Used as a context manager::

        with Tape() as tape:
            y = ops.conv2d(x, kernel)
            loss = ops.dice_l2_loss(target, y)
        tape.backward(loss)

    Tensors created inside the context stay referenced by the recorded
    closures until the tape is cleared or dropped.
    """

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("a tape is already active in this context")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _LOCAL.tape = None

    def record(self, backward) -> None:
        self._records.append(backward)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.asarray(1.0, dtype=loss.dtype))
        for fn in reversed(self._records):
            fn()

    def clear(self) -> None:
        self._records.clear()


def save_npy(path, array: np.ndarray) -> None:
    """Write an array as NPY v1.0, C-order, little-endian float32/float64."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float64:
        arr = arr.astype("<f8")
    else:
        arr = arr.astype("<f4")
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, arr, version=(1, 0), allow_pickle=False)


def load_npy(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return np.lib.format.read_array(fh, allow_pickle=False)
