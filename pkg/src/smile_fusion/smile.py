"""Sparse mixture of low-rank experts built from fine-tuning deltas.

Each upscaled linear layer keeps the pre-trained ``(W, b)`` as a shared part
and holds one low-rank expert per task, obtained by truncating the SVD of
that task's weight delta. The router scores expert ``i`` by the norm of the
input projected onto the expert's leading right singular vectors, applies a
softmax, keeps the top-K experts and renormalizes their weights.
"""

from __future__ import annotations

import fnmatch
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Tensor, TensorStore
from .errors import ConfigError, ShapeError, StoreMismatchError
from .linalg import SvdFactors, normalize_factors, svd, truncate
from .tensor import as_matrix, as_vector, frozen

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmileConfig:
    k: int
    k_gate: int
    top_k: int
    T: int

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"need at least one expert, got T={self.T}")
        if self.k < 1:
            raise ConfigError(f"expert rank k must be >= 1, got {self.k}")
        if self.k_gate < 1:
            raise ConfigError(f"router rank k_gate must be >= 1, got {self.k_gate}")
        if not 1 <= self.top_k <= self.T:
            raise ConfigError(f"top_k must be in [1, T={self.T}], got {self.top_k}")

    def check_lora(self, r_lora: int) -> None:
        if self.k_gate >= r_lora:
            raise ConfigError(f"k_gate={self.k_gate} must be smaller than the LoRA rank {r_lora}")
        if self.k > r_lora:
            raise ConfigError(f"k={self.k} must not exceed the LoRA rank {r_lora}")


@dataclass(frozen=True)
class LowRankExpert:
    """``dW ~= U diag(sigma) V^T`` plus the router's gate basis.

    ``V_gate`` is the first ``g_eff`` columns of the same right singular basis.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    V_gate: np.ndarray
    delta_b: np.ndarray | None = None

    @property
    def k_eff(self) -> int:
        return len(self.sigma)

    @property
    def g_eff(self) -> int:
        return self.V_gate.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    def delta(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T

    def apply(self, X: np.ndarray) -> np.ndarray:
        """``U (sigma * (V^T x))`` for each row x of X, bias delta included."""
        out = ((X @ self.V) * self.sigma) @ self.U.T
        if self.delta_b is not None:
            out = out + self.delta_b
        return out

    @classmethod
    def null(cls, m: int, n: int, delta_b=None) -> "LowRankExpert":
        return cls(
            frozen(np.zeros((m, 0))),
            frozen(np.zeros(0)),
            frozen(np.zeros((n, 0))),
            frozen(np.zeros((n, 0))),
            None if delta_b is None else as_vector(delta_b),
        )


def build_expert(factors: SvdFactors, delta_b, cfg: SmileConfig) -> LowRankExpert:
    """Truncate the delta's SVD at ``min(k, rank)`` and slice the gate basis."""
    m, n = factors.shape
    if delta_b is not None:
        delta_b = as_vector(delta_b)
        if delta_b.shape[0] != m:
            raise ShapeError(f"bias delta has length {delta_b.shape[0]}, expected {m}")
    if factors.rank == 0:
        return LowRankExpert.null(m, n, delta_b)
    U, sigma, V = truncate(factors, cfg.k)
    g = min(cfg.k_gate, factors.rank)
    V_gate = frozen(factors.V[:, :g].copy())
    return LowRankExpert(U, sigma, V, V_gate, delta_b)


def lora_factors(B, A) -> SvdFactors:
    """SVD of ``B @ A`` without forming the m x n product.

    With thin QRs ``B = Q_B R_B`` and ``A^T = Q_A R_A`` the product is
    ``Q_B (R_B R_A^T) Q_A^T``, so only the r x r core needs decomposing.
    """
    B = as_matrix(B)
    A = as_matrix(A)
    if B.shape[1] != A.shape[0]:
        raise ShapeError(f"LoRA factors do not chain: B {B.shape}, A {A.shape}")
    m, n = B.shape[0], A.shape[1]
    q_b, r_b = np.linalg.qr(B)
    q_a, r_a = np.linalg.qr(A.T)
    core = svd(r_b @ r_a.T)
    return normalize_factors(q_b @ core.U, core.sigma, q_a @ core.V, (m, n))


def build_expert_from_lora(B, A, cfg: SmileConfig, delta_b=None) -> LowRankExpert:
    B = as_matrix(B)
    cfg.check_lora(B.shape[1])
    return build_expert(lora_factors(B, A), delta_b, cfg)


@dataclass(frozen=True)
class RouterOutput:
    logits: np.ndarray
    probs: np.ndarray
    selected: tuple[int, ...]
    weights: np.ndarray


@dataclass(frozen=True)
class SmileLayer:
    W: np.ndarray
    b: np.ndarray | None
    experts: tuple[LowRankExpert, ...]
    config: SmileConfig

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        if len(self.experts) != self.config.T:
            raise ShapeError(f"{len(self.experts)} experts for T={self.config.T}")
        for i, e in enumerate(self.experts):
            if e.shape != self.W.shape:
                raise ShapeError(f"expert {i} has shape {e.shape}, layer is {self.W.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    @property
    def is_null(self) -> bool:
        return all(e.k_eff == 0 for e in self.experts)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return forward_batch(self, X)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def route_batch(layer: SmileLayer, X: np.ndarray):
    """Per-row routing: returns (logits, probs, selected indices, weights)."""
    X = np.asarray(X, dtype=np.float64)
    T = layer.config.T
    logits = np.empty((X.shape[0], T))
    for i, e in enumerate(layer.experts):
        proj = X @ e.V_gate
        logits[:, i] = np.sqrt(np.einsum("ij,ij->i", proj, proj))
    probs = _softmax(logits)
    # stable sort: equal probabilities keep the lowest expert index first
    selected = np.argsort(-probs, axis=1, kind="stable")[:, : layer.config.top_k]
    weights = np.zeros_like(probs)
    rows = np.arange(X.shape[0])[:, None]
    weights[rows, selected] = probs[rows, selected]
    weights /= weights.sum(axis=1, keepdims=True)
    return logits, probs, selected, weights


def route(layer: SmileLayer, x) -> RouterOutput:
    x = as_vector(x)
    if x.shape[0] != layer.shape[1]:
        raise ShapeError(f"input dim {x.shape[0]} != layer input dim {layer.shape[1]}")
    logits, probs, selected, weights = route_batch(layer, x[None, :])
    return RouterOutput(
        frozen(logits[0]), frozen(probs[0]), tuple(int(i) for i in selected[0]), frozen(weights[0])
    )


def forward_batch(layer: SmileLayer, X: np.ndarray) -> np.ndarray:
    """Each row of X is one token; tokens route independently."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layer.shape[1]:
        raise ShapeError(f"expected inputs of shape (N, {layer.shape[1]}), got {X.shape}")
    Y = X @ layer.W.T
    if layer.b is not None:
        Y = Y + layer.b
    _, _, _, weights = route_batch(layer, X)
    for i, e in enumerate(layer.experts):
        rows = np.nonzero(weights[:, i])[0]
        if rows.size:
            Y[rows] += weights[rows, i, None] * e.apply(X[rows])
    return Y


def forward(layer: SmileLayer, x) -> np.ndarray:
    x = as_vector(x)
    return frozen(forward_batch(layer, x[None, :])[0])


def param_count(m: int, n: int, cfg: SmileConfig, has_bias: bool) -> dict:
    """Parameters added by upscaling one m x n layer, and those touched per token.

    ``total_added = T (m k + n k + m [bias]) + n T k_gate``
    ``activated   = n T k_gate + K (m k + n k + m [bias])``
    """
    per_expert = m * cfg.k + n * cfg.k + (m if has_bias else 0)
    gates = n * cfg.T * cfg.k_gate
    return {
        "total_added": cfg.T * per_expert + gates,
        "activated_per_token": gates + cfg.top_k * per_expert,
    }


def percent_of(count: int, base: int) -> float:
    return 100.0 * count / base


def format_percent(pct: float) -> str:
    """One decimal place, truncated toward zero."""
    return f"{math.floor(pct * 10 + 1e-9) / 10:.1f}%"


def param_summary(layers: Sequence[tuple[int, int, bool]], cfg: SmileConfig) -> str:
    """``+A params (P%), B activated (Q%)`` for layers given as ``(m, n, has_bias)``.

    Percentages are relative to the weight-matrix size ``sum m n`` of the
    upscaled layers.
    """
    added = activated = dense = 0
    for m, n, has_bias in layers:
        c = param_count(m, n, cfg, has_bias)
        added += c["total_added"]
        activated += c["activated_per_token"]
        dense += m * n
    return (
        f"+{added} params ({format_percent(percent_of(added, dense))}), "
        f"{activated} activated ({format_percent(percent_of(activated, dense))})"
    )


# --- whole-model upscaling --------------------------------------------------


def linear_layer_names(store: TensorStore) -> list[str]:
    names = []
    for name in store.names():
        if name.endswith(".weight") and len(store.shape(name)) == 2:
            names.append(name[: -len(".weight")])
    return names


def select_layers(names: Sequence[str], patterns: Sequence[str] | None) -> list[str]:
    if not patterns:
        return list(names)
    return [n for n in names if any(fnmatch.fnmatchcase(n, p) for p in patterns)]


def _check_sources(base: TensorStore, experts: Sequence[TensorStore]) -> None:
    problems = []
    base_names = set(base.names())
    for i, store in enumerate(experts):
        names = set(store.names())
        for missing in sorted(base_names - names):
            problems.append(f"expert {i}: missing tensor {missing!r}")
        for extra in sorted(names - base_names):
            problems.append(f"expert {i}: unexpected tensor {extra!r}")
        for name in sorted(base_names & names):
            if store.shape(name) != base.shape(name):
                problems.append(
                    f"expert {i}: {name!r} has shape {list(store.shape(name))}, "
                    f"base has {list(base.shape(name))}"
                )
    if problems:
        raise StoreMismatchError(problems)


@dataclass(frozen=True)
class DeltaFactors:
    """SVDs of one layer's per-task deltas; reusable across configurations."""

    W: np.ndarray
    b: np.ndarray | None
    factors: tuple[SvdFactors, ...]
    delta_bs: tuple[np.ndarray | None, ...]

    @property
    def is_zero(self) -> bool:
        no_bias = all(db is None or not np.any(db) for db in self.delta_bs)
        return no_bias and all(f.rank == 0 for f in self.factors)

    def build(self, cfg: SmileConfig) -> SmileLayer:
        experts = tuple(build_expert(f, db, cfg) for f, db in zip(self.factors, self.delta_bs))
        return SmileLayer(self.W, self.b, experts, cfg)


def layer_delta_factors(base: TensorStore, experts: Sequence[TensorStore], layer: str) -> DeltaFactors:
    W = base.array(f"{layer}.weight")
    bias_name = f"{layer}.bias"
    b = base.array(bias_name) if bias_name in base else None
    factors = []
    delta_bs = []
    for store in experts:
        factors.append(svd(store.array(f"{layer}.weight") - W))
        delta_bs.append(None if b is None else frozen(store.array(bias_name) - b))
    return DeltaFactors(W, b, tuple(factors), tuple(delta_bs))


@dataclass
class SmileBundle:
    """Upscaled model: SMILE layers plus tensors copied from the base."""

    config: SmileConfig
    layers: dict[str, SmileLayer]
    passthrough: dict[str, Tensor]
    warnings: list[str] = field(default_factory=list)

    def linear(self, name: str):
        if name in self.layers:
            return self.layers[name]
        W = self.passthrough[f"{name}.weight"].to_array()
        b = self.passthrough.get(f"{name}.bias")
        b = 0.0 if b is None else b.to_array()
        return lambda X: X @ W.T + b

    def metadata(self) -> dict:
        return {
            "k": self.config.k,
            "k_gate": self.config.k_gate,
            "top_k": self.config.top_k,
            "T": self.config.T,
            "layers": sorted(self.layers),
        }

    def layer_shapes(self) -> list[tuple[int, int, bool]]:
        return [(*self.layers[n].shape, self.layers[n].b is not None) for n in sorted(self.layers)]

    def added_params(self) -> int:
        total = 0
        for layer in self.layers.values():
            m, n = layer.shape
            total += param_count(m, n, self.config, layer.b is not None)["total_added"]
        return total

    def to_store(self, dtype: str = "F64") -> TensorStore:
        """Passthrough tensors keep their source bytes; SMILE factors use ``dtype``."""
        entries = dict(self.passthrough)
        for name, layer in self.layers.items():
            entries[f"{name}.shared.weight"] = Tensor.from_array(layer.W, dtype)
            if layer.b is not None:
                entries[f"{name}.shared.bias"] = Tensor.from_array(layer.b, dtype)
            for i, e in enumerate(layer.experts):
                entries[f"{name}.expert.{i}.u"] = Tensor.from_array(e.U, dtype)
                entries[f"{name}.expert.{i}.s"] = Tensor.from_array(e.sigma, dtype)
                entries[f"{name}.expert.{i}.v"] = Tensor.from_array(e.V, dtype)
                if e.delta_b is not None:
                    entries[f"{name}.expert.{i}.delta_b"] = Tensor.from_array(e.delta_b, dtype)
                entries[f"{name}.gate.{i}.v"] = Tensor.from_array(e.V_gate, dtype)
        return TensorStore(entries)

    @classmethod
    def from_store(cls, store: TensorStore, metadata: dict) -> "SmileBundle":
        try:
            cfg = SmileConfig(metadata["k"], metadata["k_gate"], metadata["top_k"], metadata["T"])
            layer_names = list(metadata["layers"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad bundle metadata: {exc}") from exc
        claimed = set()
        layers = {}
        for name in layer_names:
            def take(key, required=True):
                full = f"{name}.{key}"
                if full not in store:
                    if required:
                        raise StoreMismatchError([f"bundle is missing {full!r}"])
                    return None
                claimed.add(full)
                return store.array(full)

            W = take("shared.weight")
            b = take("shared.bias", required=False)
            experts = []
            for i in range(cfg.T):
                experts.append(
                    LowRankExpert(
                        take(f"expert.{i}.u"),
                        take(f"expert.{i}.s"),
                        take(f"expert.{i}.v"),
                        take(f"gate.{i}.v"),
                        take(f"expert.{i}.delta_b", required=False),
                    )
                )
            layers[name] = SmileLayer(W, b, tuple(experts), cfg)
        passthrough = {n: store.entries[n] for n in store.names() if n not in claimed}
        return cls(cfg, layers, passthrough)


def upscale_model(
    base: TensorStore,
    experts: Sequence[TensorStore],
    layer_selector: Sequence[str] | None,
    cfg: SmileConfig,
    jobs: int = 1,
) -> SmileBundle:
    """Replace each selected linear layer by a SMILE layer.

    Unselected tensors are copied from ``base`` verbatim. Layers are
    decomposed independently (in parallel when ``jobs > 1``); assembly order
    is fixed by layer name.
    """
    if len(experts) != cfg.T:
        raise ConfigError(f"config says T={cfg.T} but {len(experts)} expert stores were given")
    _check_sources(base, experts)
    selected = select_layers(linear_layer_names(base), layer_selector)
    if not selected:
        raise ConfigError(f"no linear layers match {list(layer_selector or [])}")
    deltas = delta_factors_for(base, experts, selected, jobs)
    return assemble(base, deltas, cfg)


def delta_factors_for(base, experts, layers, jobs: int = 1) -> dict[str, DeltaFactors]:
    if jobs > 1 and len(layers) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda n: layer_delta_factors(base, experts, n), layers))
    else:
        results = [layer_delta_factors(base, experts, n) for n in layers]
    return dict(zip(layers, results))


def assemble(base: TensorStore, deltas: dict[str, DeltaFactors], cfg: SmileConfig) -> SmileBundle:
    layers = {}
    warnings = []
    owned = set()
    for name in sorted(deltas):
        d = deltas[name]
        if d.is_zero:
            msg = f"layer {name!r}: all deltas zero; experts are null"
            log.warning(msg)
            warnings.append(msg)
        layers[name] = d.build(cfg)
        owned.update({f"{name}.weight", f"{name}.bias"})
    passthrough = {n: base.entries[n] for n in base.names() if n not in owned}
    return SmileBundle(cfg, layers, passthrough, warnings)
