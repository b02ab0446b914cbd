"""Desk-scale experiment factory.

Builds a pre-trained base, T task models and task samplers, evaluates fused
models, and runs the subspace-projection ablation. Two kinds of fixtures:

* analytic: base plus hand-constructed low-rank deltas; tasks are defined by
  the expert models themselves, so exact expectations are available;
* SGD: expert models are fine-tuned from the base with plain SGD towards a
  task teacher.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import DeltaSet, task_arithmetic, weight_average
from .checkpoint import LayerSpec, ModelSpec, TensorStore, read_store, write_store
from .errors import ConfigError, MalformedHeaderError, StoreError, TrainingError
from .linalg import svd
from .model import Model, linears_from_params, run
from .smile import SmileBundle, route_batch
from .subspace import Zone, partition_of, project_delta

log = logging.getLogger(__name__)

KINDS = ("regression", "classification")


@dataclass
class TaskSpec:
    """A task: inputs ``mean + basis @ (scale * z)`` with ``z ~ N(0, I)``,
    targets given by ``teacher``."""

    task_id: int
    kind: str
    teacher: Model
    input_basis: np.ndarray
    input_mean: np.ndarray | None = None
    input_scale: float = 1.0
    seed: int = 0
    teacher_ref: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        self.input_basis = np.asarray(self.input_basis, dtype=np.float64)
        if self.input_mean is None:
            self.input_mean = np.zeros(self.input_dim)
        self.input_mean = np.asarray(self.input_mean, dtype=np.float64)

    @property
    def input_dim(self) -> int:
        return self.input_basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.teacher.spec.output_dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.input_basis.shape[1])) * self.input_scale
        return self.input_mean + z @ self.input_basis.T

    def train_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, 0])

    def eval_rng(self, seed: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 1, seed])


@dataclass
class EvalReport:
    method: str
    per_task_metric: list[float]
    normalized_param_count: float
    metric_kind: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_task_metric))

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "per_task_metric": self.per_task_metric,
            "metric_kind": self.metric_kind,
            "mean_metric": self.mean,
            "normalized_param_count": self.normalized_param_count,
        }


# --- base model and fine-tuning ---------------------------------------------


def make_pretrained(spec: ModelSpec, seed: int, dtype: str = "F64") -> TensorStore:
    """Gaussian weights scaled by ``1/sqrt(in_dim)``; zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for layer in spec.linear_layers():
        arrays[f"{layer.name}.weight"] = rng.standard_normal((layer.out_dim, layer.in_dim)) / np.sqrt(layer.in_dim)
        if layer.has_bias:
            arrays[f"{layer.name}.bias"] = np.zeros(layer.out_dim)
    return TensorStore.from_arrays(arrays, dtype)


def _targets(task: TaskSpec, X: np.ndarray) -> np.ndarray:
    Y = task.teacher(X)
    if task.kind == "classification":
        return np.argmax(Y, axis=1)
    return Y


def _loss_and_grad(kind: str, Y: np.ndarray, target: np.ndarray):
    n = Y.shape[0]
    if kind == "regression":
        diff = Y - target
        return 0.5 * float(np.sum(diff * diff)) / n, diff / n
    z = Y - Y.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -float(logp[rows, target].sum()) / n
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    return loss, grad / n


def finetune(
    base: TensorStore,
    spec: ModelSpec,
    task: TaskSpec,
    steps: int,
    lr: float,
    freeze_bias: bool = False,
    batch_size: int = 32,
    dtype: str | None = None,
) -> TensorStore:
    """Plain mini-batch SGD: squared loss for regression, softmax
    cross-entropy for classification."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    params = base.arrays()
    params = {k: v.copy() for k, v in params.items()}
    rng = task.train_rng()
    # overflow is reported as a TrainingError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            X = task.sample(batch_size, rng)
            target = _targets(task, X)
            acts = []
            H = X
            for layer in spec.layers:
                acts.append(H)
                if layer.kind == "relu":
                    H = np.maximum(H, 0.0)
                else:
                    H = H @ params[f"{layer.name}.weight"].T
                    if layer.has_bias:
                        H = H + params[f"{layer.name}.bias"]
            loss, G = _loss_and_grad(task.kind, H, target)
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at step {step}", step)
            grads = {}
            for layer, A in zip(reversed(spec.layers), reversed(acts)):
                if layer.kind == "relu":
                    G = G * (A > 0)
                    continue
                W = params[f"{layer.name}.weight"]
                grads[f"{layer.name}.weight"] = G.T @ A
                if layer.has_bias:
                    grads[f"{layer.name}.bias"] = G.sum(axis=0)
                G = G @ W
            for name, g in grads.items():
                if freeze_bias and name.endswith(".bias"):
                    continue
                params[name] -= lr * g
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise TrainingError(f"parameters became non-finite at step {step}", step)
    dtype = dtype or next(iter(base.entries.values())).dtype
    out = TensorStore.from_arrays(params, dtype)
    if freeze_bias:
        # keep the original bytes so frozen biases are bit-identical
        entries = dict(out.entries)
        for name in base.names():
            if name.endswith(".bias"):
                entries[name] = base.entries[name]
        out = TensorStore(entries)
    return out


# --- evaluation -------------------------------------------------------------


def score(task: TaskSpec, Y: np.ndarray, X: np.ndarray) -> float:
    """Accuracy for classification, ``1 / (1 + MSE)`` for regression."""
    target = _targets(task, X)
    if task.kind == "classification":
        return float(np.mean(np.argmax(Y, axis=1) == target))
    mse = float(np.mean((Y - target) ** 2))
    return 1.0 / (1.0 + mse)


def evaluate(
    model: Callable[[np.ndarray], np.ndarray] | Sequence[Callable],
    tasks: Sequence[TaskSpec],
    n_samples: int,
    seed: int,
    method: str = "model",
    normalized_param_count: float = 1.0,
) -> EvalReport:
    """Score ``model`` on a held-out sample stream of every task.

    ``model`` may also be a sequence with one callable per task (individual
    models).
    """
    metrics = []
    for i, task in enumerate(tasks):
        fn = model[i] if isinstance(model, (list, tuple)) else model
        X = task.sample(n_samples, task.eval_rng(seed))
        metrics.append(score(task, fn(X), X))
    return EvalReport(method, metrics, normalized_param_count, [t.kind for t in tasks])


@dataclass
class RouterAccuracy:
    per_layer_task: dict[str, list[float]]

    @property
    def per_layer(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.per_layer_task.items()}

    @property
    def mean(self) -> float:
        vals = list(self.per_layer.values())
        return float(np.mean(vals)) if vals else 1.0

    @property
    def worst(self) -> float:
        return min((min(v) for v in self.per_layer_task.values()), default=1.0)


def router_accuracy(
    bundle: SmileBundle, spec: ModelSpec, tasks: Sequence[TaskSpec], n_samples: int, seed: int
) -> RouterAccuracy:
    """Fraction of task-i inputs whose top-1 expert is i, per upscaled layer.

    Layers whose experts are all null are skipped.
    """
    model = fused_model(spec, bundle)
    layers = [n for n, l in bundle.layers.items() if not l.is_null]
    acc = {name: [] for name in layers}
    for i, task in enumerate(tasks):
        X = task.sample(n_samples, task.eval_rng(seed))
        trace = {}
        model(X, trace)
        for name in layers:
            _, probs, _, _ = route_batch(bundle.layers[name], trace[name])
            top1 = np.argsort(-probs, axis=1, kind="stable")[:, 0]
            acc[name].append(float(np.mean(top1 == i)))
    return RouterAccuracy(acc)


# --- fused models -----------------------------------------------------------


def fused_model(spec: ModelSpec, bundle: SmileBundle) -> Model:
    return Model(spec, {l.name: bundle.linear(l.name) for l in spec.linear_layers()})


def merged_params(spec: ModelSpec, base: TensorStore, experts: Sequence[TensorStore], method: str, lam: float = 0.3):
    params = {}
    for layer in spec.linear_layers():
        wname, bname = f"{layer.name}.weight", f"{layer.name}.bias"
        W = base.array(wname)
        b = base.array(bname) if layer.has_bias else np.zeros(W.shape[0])
        ds = DeltaSet.from_finetuned(
            W,
            b,
            [e.array(wname) for e in experts],
            [e.array(bname) if layer.has_bias else b for e in experts],
        )
        if method == "average":
            W2, b2 = weight_average(ds)
        elif method == "task-arithmetic":
            W2, b2 = task_arithmetic(ds, lam)
        else:
            raise ConfigError(f"unknown merge method {method!r}")
        params[wname] = W2
        if layer.has_bias:
            params[bname] = b2
    return params


def merged_model(spec, base, experts, method, lam=0.3) -> Model:
    return Model(spec, linears_from_params(spec, merged_params(spec, base, experts, method, lam)))


def smile_normalized_params(base: TensorStore, bundle: SmileBundle) -> float:
    total = base.param_count()
    return (total + bundle.added_params()) / total


# --- subspace ablation ------------------------------------------------------


def zone_projected_model(spec: ModelSpec, base: TensorStore, expert: TensorStore, zone: Zone) -> Model:
    """Base model with each linear layer's delta projected onto ``zone`` of
    that layer's pre-trained spectrum; biases stay at the base values."""
    params = base.arrays()
    for layer in spec.linear_layers():
        name = f"{layer.name}.weight"
        W = params[name]
        f = svd(W, "full")
        part = partition_of(f)
        (r0, r1), (c0, c1) = part.row_range(zone), part.col_range(zone)
        if r1 > r0 and c1 > c0:
            params[name] = W + project_delta(expert.array(name) - W, f, zone, part)
    return Model(spec, linears_from_params(spec, params))


def subspace_ablation(spec, base, experts, tasks, n_samples: int, seed: int) -> dict[str, EvalReport]:
    reports = {
        "pretrained": evaluate(Model.from_store(spec, base), tasks, n_samples, seed, "pretrained"),
        "finetuned": evaluate(
            [Model.from_store(spec, e) for e in experts], tasks, n_samples, seed, "finetuned"
        ),
    }
    for zone in Zone:
        models = [zone_projected_model(spec, base, e, zone) for e in experts]
        reports[zone.value] = evaluate(models, tasks, n_samples, seed, f"zone-{zone.value}")
    return reports


# --- fixtures ---------------------------------------------------------------


@dataclass
class Fixture:
    spec: ModelSpec
    base: TensorStore
    experts: list[TensorStore]
    tasks: list[TaskSpec]
    teachers: list[TensorStore] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.experts)


def _orthonormal(rng, n) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def task_subspaces(rng, n: int, T: int, dim: int, overlap_deg: float = 0.0) -> list[np.ndarray]:
    """T orthonormal ``n x dim`` bases. With ``overlap_deg = 0`` they are
    mutually orthogonal; otherwise each is tilted by that angle towards a
    shared block, so every pair of subspaces has principal angles
    ``90 - ...`` set by the tilt."""
    theta = np.deg2rad(overlap_deg)
    need = (T + (1 if theta else 0)) * dim
    if need > n:
        raise ConfigError(f"{T} task subspaces of dim {dim} (+ shared) do not fit in R^{n}")
    Q = _orthonormal(rng, n)
    shared = Q[:, T * dim:(T + 1) * dim] if theta else 0.0
    return [np.cos(theta) * Q[:, t * dim:(t + 1) * dim] + np.sin(theta) * shared for t in range(T)]


def _low_rank(rng, left_basis, right_basis, sigma) -> np.ndarray:
    """``L diag(sigma) R^T`` with L, R random orthonormal inside the given bases."""
    r = len(sigma)
    a = _orthonormal(rng, left_basis.shape[1])[:, :r]
    b = _orthonormal(rng, right_basis.shape[1])[:, :r]
    return (left_basis @ a * sigma) @ (right_basis @ b).T


def delta_spectrum(rank: int, head: int | None, decay: float, tail_ratio: float, scale: float) -> np.ndarray:
    head = max(1, rank // 4) if head is None else head
    sigma = scale * decay ** np.arange(rank)
    sigma[head:] *= tail_ratio
    return sigma


def analytic_fixture(
    T: int = 4,
    dims: tuple[int, int, int] = (64, 64, 16),
    subspace_dim: int = 8,
    delta_rank: int = 8,
    head: int | None = None,
    decay: float = 0.5,
    tail_ratio: float = 0.05,
    delta_scale: float = 3.0,
    input_scale: float = 6.0,
    overlap_deg: float = 0.0,
    kind: str = "classification",
    seed: int = 0,
) -> Fixture:
    """Two-layer MLP with hand-built rank-``delta_rank`` deltas per task.

    Task t draws inputs from its own subspace S_t. The base first layer sends
    S_t into a block H_t of hidden units (and acts generically on unused input
    directions); expert t's first-layer delta maps S_t into H_t and its
    second-layer delta reads from H_t.

    Deltas are approximately low rank: ``head`` leading singular values
    (default ``delta_rank // 4``) follow ``delta_scale * decay**j`` and the
    remaining ones are damped by ``tail_ratio``.
    """
    n_in, n_hid, n_out = dims
    if n_hid % T:
        raise ConfigError(f"hidden width {n_hid} must split evenly over {T} tasks")
    block = n_hid // T
    if delta_rank > min(block, subspace_dim, n_out):
        raise ConfigError("delta_rank exceeds the room available in task blocks")
    rng = np.random.default_rng(seed)
    spec = ModelSpec.mlp(dims)
    bases = task_subspaces(rng, n_in, T, subspace_dim, overlap_deg)
    eye_h = np.eye(n_hid)
    hblocks = [eye_h[:, t * block:(t + 1) * block] for t in range(T)]

    used = np.hstack(bases)
    q_used, _ = np.linalg.qr(used)
    free = np.linalg.qr(np.hstack([q_used, rng.standard_normal((n_in, n_in))]))[0][:, q_used.shape[1]:n_in]
    W1 = rng.standard_normal((n_hid, free.shape[1])) @ free.T / np.sqrt(n_in)
    for t in range(T):
        G = rng.standard_normal((block, subspace_dim)) / np.sqrt(subspace_dim)
        W1 += hblocks[t] @ G @ bases[t].T
    W2 = rng.standard_normal((n_out, n_hid)) / np.sqrt(n_hid)
    base_arrays = {
        "fc1.weight": W1,
        "fc1.bias": np.zeros(n_hid),
        "fc2.weight": W2,
        "fc2.bias": 0.1 * rng.standard_normal(n_out),
    }
    sigma = delta_spectrum(delta_rank, head, decay, tail_ratio, delta_scale)
    eye_o = np.eye(n_out)
    experts = []
    for t in range(T):
        arr = dict(base_arrays)
        arr["fc1.weight"] = W1 + _low_rank(rng, hblocks[t], bases[t], sigma)
        arr["fc1.bias"] = hblocks[t] @ (0.1 * rng.standard_normal(block))
        arr["fc2.weight"] = W2 + _low_rank(rng, eye_o, hblocks[t], sigma)
        arr["fc2.bias"] = base_arrays["fc2.bias"] + 0.1 * rng.standard_normal(n_out)
        experts.append(TensorStore.from_arrays(arr, "F64"))
    base = TensorStore.from_arrays(base_arrays, "F64")
    tasks = [
        TaskSpec(t, kind, Model.from_store(spec, experts[t]), bases[t], None, input_scale,
                 seed=int(rng.integers(2**31)), teacher_ref=f"expert_{t}.safetensors")
        for t in range(T)
    ]
    meta = {"kind": "analytic", "seed": seed, "delta_rank": delta_rank, "overlap_deg": overlap_deg}
    return Fixture(spec, base, experts, tasks, None, meta)


def sgd_fixture(
    T: int = 4,
    n_in: int = 64,
    n_out: int = 32,
    subspace_dim: int = 8,
    delta_rank: int = 4,
    delta_scale: float = 1.5,
    leak: float = 0.02,
    steps: int = 400,
    lr: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
) -> Fixture:
    """Single linear layer fine-tuned by SGD towards per-task teachers.

    Each teacher adds to the base a rank-``delta_rank`` map that reads from a
    task subspace spanned by the base layer's low-energy right singular
    directions (zone II and its null space) and writes into its low-energy
    left directions, plus a small full-rank ``leak``. Biases stay frozen.
    """
    rng = np.random.default_rng(seed)
    spec = ModelSpec((LayerSpec("fc1", "readout", n_in, n_out, True),))
    base = make_pretrained(spec, seed)
    W = base.array("fc1.weight")
    f = svd(W, "full")
    part = partition_of(f)
    v_low = f.V[:, part.r_half:]
    u_low = f.U[:, part.r_half:]
    experts, teachers, tasks = [], [], []
    sigma = delta_scale * np.ones(delta_rank)
    for t in range(T):
        mix = _orthonormal(rng, v_low.shape[1])[:, :subspace_dim]
        basis = v_low @ mix
        D = _low_rank(rng, u_low, basis, sigma)
        D += leak * rng.standard_normal(W.shape) / np.sqrt(n_in)
        teacher = TensorStore.from_arrays({"fc1.weight": W + D, "fc1.bias": base.array("fc1.bias")}, "F64")
        task = TaskSpec(t, "regression", Model.from_store(spec, teacher), basis, None, 1.0,
                        seed=int(rng.integers(2**31)), teacher_ref=f"teacher_{t}.safetensors")
        experts.append(finetune(base, spec, task, steps, lr, freeze_bias=True, batch_size=batch_size))
        teachers.append(teacher)
        tasks.append(task)
    meta = {"kind": "sgd", "seed": seed, "steps": steps, "lr": lr}
    return Fixture(spec, base, experts, tasks, teachers, meta)


# --- fixture files ----------------------------------------------------------


def save_fixture(fx: Fixture, out_dir) -> Path:
    """Write ``base``, experts, optional teachers, ``model.json`` and
    ``tasks.json`` into ``out_dir``; returns the tasks.json path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_store(fx.base, out / "base.safetensors")
    expert_files = []
    for i, e in enumerate(fx.experts):
        name = f"expert_{i}.safetensors"
        write_store(e, out / name)
        expert_files.append(name)
    for i, t in enumerate(fx.teachers or []):
        write_store(t, out / f"teacher_{i}.safetensors")
    fx.spec.save(out / "model.json")
    doc = {
        "model": "model.json",
        "base": "base.safetensors",
        "experts": expert_files,
        "meta": fx.meta,
        "tasks": [
            {
                "task_id": t.task_id,
                "kind": t.kind,
                "input_dim": t.input_dim,
                "output_dim": t.output_dim,
                "teacher": t.teacher_ref,
                "input_mean": t.input_mean.tolist(),
                "input_basis": t.input_basis.tolist(),
                "input_scale": t.input_scale,
                "seed": t.seed,
            }
            for t in fx.tasks
        ],
    }
    path = out / "tasks.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_fixture(tasks_json) -> Fixture:
    path = Path(tasks_json)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path} is not valid JSON: {exc}") from exc
    root = path.parent
    try:
        spec = ModelSpec.load(root / doc["model"])
        base = read_store(root / doc["base"])
        experts = [read_store(root / e) for e in doc["experts"]]
        tasks = []
        for t in doc["tasks"]:
            teacher = Model.from_store(spec, read_store(root / t["teacher"]))
            tasks.append(
                TaskSpec(
                    t["task_id"], t["kind"], teacher, np.array(t["input_basis"]),
                    np.array(t["input_mean"]), t["input_scale"], t["seed"], t["teacher"],
                )
            )
    except (KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"{path}: missing or bad field {exc}") from exc
    return Fixture(spec, base, experts, tasks, None, doc.get("meta", {}))
