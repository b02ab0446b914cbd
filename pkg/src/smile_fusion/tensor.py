"""Dense real matrices and vectors.

Matrices and vectors are plain float64 numpy arrays (C order, i.e. row-major).
The helpers here validate shapes, coerce dtypes and return read-only results so
downstream code can treat them as immutable values.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "as_matrix",
    "as_vector",
    "frozen",
    "matmul",
    "matvec",
    "frobenius_inner",
    "frobenius_norm",
    "l2_norm",
    "outer",
    "transpose",
    "scale",
    "add",
    "column_slice",
]


def frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def as_matrix(a, *, allow_empty: bool = False) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not allow_empty and (arr.shape[0] < 1 or arr.shape[1] < 1):
        raise ShapeError(f"matrix must have rows >= 1 and cols >= 1, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def as_vector(v) -> np.ndarray:
    arr = np.array(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, allow_empty=True)
    b = as_matrix(b, allow_empty=True)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return frozen(a @ b)


def matvec(a, x) -> np.ndarray:
    a = as_matrix(a, allow_empty=True)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec shape mismatch: {a.shape} x {x.shape}")
    return frozen(a @ x)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what} shape mismatch: {a.shape} vs {b.shape}")


def frobenius_inner(a, b) -> float:
    """``tr(a b^T)``, the sum of elementwise products."""
    a = as_matrix(a, allow_empty=True)
    b = as_matrix(b, allow_empty=True)
    _same_shape(a, b, "frobenius_inner")
    return float(np.sum(a * b))


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def l2_norm(v) -> float:
    v = as_vector(v)
    return float(np.sqrt(np.dot(v, v)))


def outer(u, v) -> np.ndarray:
    return frozen(np.outer(as_vector(u), as_vector(v)))


def transpose(a) -> np.ndarray:
    return frozen(as_matrix(a, allow_empty=True).T)


def scale(a, c: float) -> np.ndarray:
    return frozen(np.asarray(a, dtype=np.float64) * float(c))


def add(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b, "add")
    return frozen(a + b)


def column_slice(a, start: int, stop: int) -> np.ndarray:
    """Copy of columns ``start:stop`` (never a view)."""
    a = as_matrix(a, allow_empty=True)
    if not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {a.shape}")
    return frozen(a[:, start:stop].copy())
