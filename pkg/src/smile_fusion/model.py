"""Forward evaluation of linear/relu stacks described by a ModelSpec."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .checkpoint import ModelSpec, TensorStore

LinearFn = Callable[[np.ndarray], np.ndarray]


def dense_linear(W: np.ndarray, b: np.ndarray | None) -> LinearFn:
    def fn(X):
        Y = X @ W.T
        return Y if b is None else Y + b

    return fn


def dense_linears(spec: ModelSpec, store: TensorStore) -> dict[str, LinearFn]:
    out = {}
    for layer in spec.linear_layers():
        W = store.array(f"{layer.name}.weight")
        b = store.array(f"{layer.name}.bias") if layer.has_bias else None
        out[layer.name] = dense_linear(W, b)
    return out


def linears_from_params(spec: ModelSpec, params: Mapping[str, np.ndarray]) -> dict[str, LinearFn]:
    return {
        layer.name: dense_linear(params[f"{layer.name}.weight"], params.get(f"{layer.name}.bias"))
        for layer in spec.linear_layers()
    }


def run(spec: ModelSpec, linears: Mapping[str, LinearFn], X, trace: dict | None = None) -> np.ndarray:
    """Apply the stack to a batch ``X`` (rows are samples).

    If ``trace`` is given, the input batch of every linear layer is stored
    under the layer name.
    """
    H = np.asarray(X, dtype=np.float64)
    if H.ndim == 1:
        return run(spec, linears, H[None, :], trace)[0]
    for layer in spec.layers:
        if layer.kind == "relu":
            H = np.maximum(H, 0.0)
        else:
            if trace is not None:
                trace[layer.name] = H
            H = linears[layer.name](H)
    return H


class Model:
    """Callable wrapper binding a spec to its linear-layer implementations."""

    def __init__(self, spec: ModelSpec, linears: Mapping[str, LinearFn]):
        self.spec = spec
        self.linears = dict(linears)

    @classmethod
    def from_store(cls, spec: ModelSpec, store: TensorStore) -> "Model":
        return cls(spec, dense_linears(spec, store))

    def __call__(self, X, trace: dict | None = None) -> np.ndarray:
        return run(self.spec, self.linears, X, trace)
