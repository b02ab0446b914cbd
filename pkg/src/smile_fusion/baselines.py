"""Weight averaging, task arithmetic and the merging-error functional for one
linear layer ``y = W x + b``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import least_squares
from .tensor import as_matrix, as_vector, frozen


@dataclass(frozen=True)
class DeltaSet:
    """Base layer ``(W, b)`` and per-task deltas ``(dW_l, db_l)``."""

    W: np.ndarray
    b: np.ndarray
    dWs: tuple[np.ndarray, ...]
    dbs: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.dWs:
            raise ShapeError("DeltaSet needs at least one task")
        if len(self.dWs) != len(self.dbs):
            raise ShapeError(f"{len(self.dWs)} weight deltas but {len(self.dbs)} bias deltas")
        for i, (dW, db) in enumerate(zip(self.dWs, self.dbs)):
            if dW.shape != self.W.shape or db.shape != self.b.shape:
                raise ShapeError(
                    f"task {i}: delta shapes {dW.shape}/{db.shape} do not match "
                    f"base {self.W.shape}/{self.b.shape}"
                )

    @classmethod
    def from_deltas(cls, W, b, dWs, dbs) -> "DeltaSet":
        return cls(
            as_matrix(W),
            as_vector(b),
            tuple(as_matrix(d) for d in dWs),
            tuple(as_vector(d) for d in dbs),
        )

    @classmethod
    def from_finetuned(cls, W, b, Ws, bs) -> "DeltaSet":
        W, b = as_matrix(W), as_vector(b)
        return cls.from_deltas(W, b, [as_matrix(x) - W for x in Ws], [as_vector(x) - b for x in bs])

    @property
    def T(self) -> int:
        return len(self.dWs)

    @property
    def bias_matrix(self) -> np.ndarray:
        """``dB``: column l is ``db_l``."""
        return frozen(np.stack(self.dbs, axis=1))


def _combine(ds: DeltaSet, lam):
    lam = np.asarray(lam, dtype=np.float64)
    dW = sum(l * d for l, d in zip(lam, ds.dWs))
    db = sum(l * d for l, d in zip(lam, ds.dbs))
    return dW, db


def task_arithmetic(ds: DeltaSet, lam: float):
    dW = sum(ds.dWs)
    db = sum(ds.dbs)
    return frozen(ds.W + lam * dW), frozen(ds.b + lam * db)


def weight_average(ds: DeltaSet):
    return task_arithmetic(ds, 1.0 / ds.T)


def optimal_bias_lambda(ds: DeltaSet, target_task: int) -> np.ndarray:
    """Closed-form ``lam = (dB^T dB)^{-1} dB^T db_i`` minimizing the bias term."""
    return least_squares(ds.bias_matrix, ds.dbs[target_task])


def _check_lambda(ds, lam, x):
    lam = as_vector(lam)
    if lam.shape[0] != ds.T:
        raise ShapeError(f"lambda has {lam.shape[0]} entries for {ds.T} tasks")
    x = as_vector(x)
    if x.shape[0] != ds.W.shape[1]:
        raise ShapeError(f"input dim {x.shape[0]} != layer input dim {ds.W.shape[1]}")
    return lam, x


def merging_error(ds: DeltaSet, lam, target_task: int, x) -> float:
    """``||y_merged - y_i||^2`` for a merged layer ``W + sum lam_l dW_l``."""
    lam, x = _check_lambda(ds, lam, x)
    dW, db = _combine(ds, lam)
    y_merged = (ds.W + dW) @ x + ds.b + db
    y_task = (ds.W + ds.dWs[target_task]) @ x + ds.b + ds.dbs[target_task]
    diff = y_merged - y_task
    return float(diff @ diff)


def merging_error_bound(ds: DeltaSet, lam, target_task: int, x) -> tuple[float, float]:
    """(weight term, bias term) of the triangle-inequality decomposition.

    Diagnostic only; the two terms are not combined into an objective.
    """
    lam, x = _check_lambda(ds, lam, x)
    dW, db = _combine(ds, lam)
    w = (dW - ds.dWs[target_task]) @ x
    b = db - ds.dbs[target_task]
    return float(w @ w), float(b @ b)
