"""Dense 4-D feature arrays and binary observation masks.

A feature tensor is a float64 ndarray of shape (batch, channels, height,
width) in C order. An observation mask is a float64 ndarray of shape
(batch, 1, height, width) whose entries are exactly 0.0 or 1.0; it marks
which pixels of the tensor it annotates carry an actual measurement.
No sparsity arithmetic lives here, only validation and shape plumbing.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError

__all__ = [
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "scale",
    "reduce_sum",
    "pad_spatial",
    "check_tensor4",
    "check_mask",
    "check_same_shape",
]


def check_tensor4(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate a (batch, channels, height, width) float64 array and return it."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeMismatchError(f"{name} must be 4-D (n, c, h, w), got shape {t.shape}")
    if any(d < 1 for d in t.shape):
        raise ShapeMismatchError(f"{name} dimensions must all be >= 1, got shape {t.shape}")
    if t.dtype != np.float64:
        t = t.astype(np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    return t


def check_mask(o: np.ndarray, like: np.ndarray | None = None, name: str = "mask") -> np.ndarray:
    """Validate a (batch, 1, height, width) mask with entries in {0, 1}.

    When `like` is given, the mask's batch and spatial dims must match it.
    """
    o = check_tensor4(o, name)
    if o.shape[1] != 1:
        raise ShapeMismatchError(f"{name} must have a single channel, got shape {o.shape}")
    bad = (o != 0.0) & (o != 1.0)
    if bad.any():
        raise ValueError(f"{name} entries must be exactly 0 or 1")
    if like is not None:
        if o.shape[0] != like.shape[0] or o.shape[2:] != like.shape[2:]:
            raise ShapeMismatchError(
                f"{name} shape {o.shape} does not align with tensor shape {like.shape}"
            )
    return o


def check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def zeros(shape: tuple[int, int, int, int]) -> np.ndarray:
    if len(shape) != 4 or any(d < 1 for d in shape):
        raise ShapeMismatchError(f"invalid 4-D shape {shape}")
    return np.zeros(shape, dtype=np.float64)


def ones(shape: tuple[int, int, int, int]) -> np.ndarray:
    if len(shape) != 4 or any(d < 1 for d in shape):
        raise ShapeMismatchError(f"invalid 4-D shape {shape}")
    return np.ones(shape, dtype=np.float64)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "mul")
    return a * b


def scale(t: np.ndarray, c: float) -> np.ndarray:
    return t * float(c)


def reduce_sum(t: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Sum over the given axes, keeping them as size-1 dims so the result stays 4-D."""
    t = check_tensor4(t)
    return t.sum(axis=tuple(axes), keepdims=True)


def pad_spatial(t: np.ndarray, k: int, fill: float = 0.0) -> np.ndarray:
    """Grow the spatial dims by k on each side, filling the border with `fill`."""
    if k < 0:
        raise ValueError(f"pad width must be >= 0, got {k}")
    t = check_tensor4(t)
    if k == 0:
        return t.copy()
    return np.pad(t, ((0, 0), (0, 0), (k, k), (k, k)), constant_values=float(fill))
