import numpy as np
import pytest

from smile_fusion.checkpoint import LayerSpec, ModelSpec, TensorStore, serialize
from smile_fusion.errors import ConfigError, TrainingError
from smile_fusion.harness import (
    EvalReport,
    TaskSpec,
    analytic_fixture,
    evaluate,
    finetune,
    fused_model,
    load_fixture,
    make_pretrained,
    merged_model,
    router_accuracy,
    save_fixture,
    sgd_fixture,
    smile_normalized_params,
    subspace_ablation,
    task_subspaces,
)
from smile_fusion.model import Model
from smile_fusion.smile import SmileConfig, upscale_model

LINEAR = ModelSpec((LayerSpec("fc1", "readout", 6, 3, True),))


def _linear_task(seed, kind="regression", n_in=6, n_out=3):
    r = np.random.default_rng(seed)
    spec = ModelSpec((LayerSpec("fc1", "readout", n_in, n_out, True),))
    teacher = TensorStore.from_arrays(
        {"fc1.weight": r.standard_normal((n_out, n_in)), "fc1.bias": r.standard_normal(n_out)}, "F64"
    )
    return spec, TaskSpec(0, kind, Model.from_store(spec, teacher), np.eye(n_in), seed=seed)


def test_pretrained_deterministic():
    spec = ModelSpec.mlp([8, 8, 4])
    assert serialize(make_pretrained(spec, 3)) == serialize(make_pretrained(spec, 3))
    assert serialize(make_pretrained(spec, 3)) != serialize(make_pretrained(spec, 4))
    assert not np.any(make_pretrained(spec, 3).array("fc1.bias"))


def test_pretrained_spectral_norm_range():
    spec = ModelSpec((LayerSpec("fc1", "readout", 64, 64, True),))
    norms = [np.linalg.norm(make_pretrained(spec, s).array("fc1.weight"), 2) for s in range(100)]
    assert 0.5 <= min(norms) and max(norms) <= 4.0


def test_finetune_zero_lr_is_base():
    spec, task = _linear_task(0)
    base = make_pretrained(spec, 1)
    out = finetune(base, spec, task, steps=5, lr=0.0)
    assert serialize(out) == serialize(base)


def test_finetune_reaches_linear_teacher():
    spec, task = _linear_task(1)
    base = make_pretrained(spec, 2, "F64")
    X = task.sample(500, np.random.default_rng(9))
    Y = task.teacher(X)

    def mse(store):
        return float(np.mean((Model.from_store(spec, store)(X) - Y) ** 2))

    tuned = finetune(base, spec, task, steps=600, lr=0.05)
    assert mse(tuned) < 1e-3 * mse(base)


def test_finetune_freeze_bias_bytes():
    spec, task = _linear_task(2)
    base = make_pretrained(spec, 3)
    out = finetune(base, spec, task, steps=20, lr=0.05, freeze_bias=True)
    assert out.entries["fc1.bias"].data == base.entries["fc1.bias"].data
    assert out.entries["fc1.weight"].data != base.entries["fc1.weight"].data


def test_finetune_classification_improves():
    spec, task = _linear_task(5, "classification", n_out=4)
    base = make_pretrained(spec, 0)
    before = evaluate(Model.from_store(spec, base), [task], 1000, 0).mean
    after = evaluate(Model.from_store(spec, finetune(base, spec, task, 300, 0.2)), [task], 1000, 0).mean
    assert after > before + 0.2


def test_finetune_divergence_reports_step():
    spec, task = _linear_task(3)
    with pytest.raises(TrainingError) as exc:
        finetune(make_pretrained(spec, 0), spec, task, steps=500, lr=1e6)
    assert exc.value.step >= 0
    with pytest.raises(ConfigError):
        finetune(make_pretrained(spec, 0), spec, task, steps=0, lr=0.1)


def test_teacher_scores_itself():
    spec, task = _linear_task(4)
    assert evaluate(task.teacher, [task], 500, 0).mean > 0.99


def test_random_model_chance_accuracy():
    spec, task = _linear_task(6, "classification", n_in=10, n_out=4)
    other = Model.from_store(spec, make_pretrained(spec, 77))
    acc = evaluate(other, [task], 2000, 0).mean
    assert abs(acc - 0.25) <= 0.05


def test_evaluate_deterministic():
    fx = analytic_fixture(T=2, dims=(32, 32, 8), subspace_dim=4, delta_rank=4)
    a = evaluate(Model.from_store(fx.spec, fx.base), fx.tasks, 300, 5)
    b = evaluate(Model.from_store(fx.spec, fx.base), fx.tasks, 300, 5)
    assert a.to_json() == b.to_json()
    assert isinstance(a, EvalReport) and len(a.per_task_metric) == 2


def test_task_subspaces_orthogonal_and_tilted(rng):
    bases = task_subspaces(rng, 20, 3, 4)
    for i in range(3):
        assert np.allclose(bases[i].T @ bases[i], np.eye(4))
        for j in range(i):
            assert np.max(np.abs(bases[i].T @ bases[j])) < 1e-12
    tilted = task_subspaces(rng, 20, 3, 4, overlap_deg=30)
    assert np.max(np.abs(tilted[0].T @ tilted[1])) > 0.1
    with pytest.raises(ConfigError):
        task_subspaces(rng, 8, 3, 4)


def test_router_single_task():
    fx = analytic_fixture(T=1, dims=(32, 32, 8), subspace_dim=4, delta_rank=4)
    bundle = upscale_model(fx.base, fx.experts, None, SmileConfig(4, 2, 1, 1))
    assert router_accuracy(bundle, fx.spec, fx.tasks, 200, 0).mean == 1.0


def test_router_orthogonal_rank_one():
    fx = analytic_fixture(T=4, delta_rank=1, head=1, seed=3)
    bundle = upscale_model(fx.base, fx.experts, None, SmileConfig(1, 1, 1, 4))
    acc = router_accuracy(bundle, fx.spec, fx.tasks, 500, 0)
    assert acc.worst == 1.0 and set(acc.per_layer) == {"fc1", "fc2"}


def test_router_identical_experts_falls_to_first():
    fx = analytic_fixture(T=4, dims=(64, 64, 16), seed=1)
    same = [fx.experts[0]] * 4
    bundle = upscale_model(fx.base, same, None, SmileConfig(2, 2, 1, 4))
    assert abs(router_accuracy(bundle, fx.spec, fx.tasks, 300, 0).mean - 0.25) < 1e-12


def test_fused_and_merged_sanity():
    fx = analytic_fixture(T=2, dims=(32, 32, 8), subspace_dim=4, delta_rank=4)
    bundle = upscale_model(fx.base, fx.experts, None, SmileConfig(4, 2, 1, 2))
    assert smile_normalized_params(fx.base, bundle) > 1.0
    X = fx.tasks[0].sample(50, np.random.default_rng(0))
    expert0 = Model.from_store(fx.spec, fx.experts[0])
    assert np.max(np.abs(fused_model(fx.spec, bundle)(X) - expert0(X))) < 1e-9
    avg = merged_model(fx.spec, fx.base, fx.experts, "average")
    ta = merged_model(fx.spec, fx.base, fx.experts, "task-arithmetic", 0.5)
    assert np.allclose(avg(X), ta(X))
    with pytest.raises(ConfigError):
        merged_model(fx.spec, fx.base, fx.experts, "ties")


def test_fixture_files_roundtrip(tmp_path):
    fx = analytic_fixture(T=2, dims=(32, 32, 8), subspace_dim=4, delta_rank=4)
    path = save_fixture(fx, tmp_path)
    back = load_fixture(path)
    a = evaluate([Model.from_store(fx.spec, e) for e in fx.experts], fx.tasks, 200, 1)
    b = evaluate([Model.from_store(back.spec, e) for e in back.experts], back.tasks, 200, 1)
    assert a.per_task_metric == b.per_task_metric == [1.0, 1.0]


def test_sgd_fixture_deterministic():
    a = sgd_fixture(T=2, steps=50, seed=4)
    b = sgd_fixture(T=2, steps=50, seed=4)
    assert [serialize(e) for e in a.experts] == [serialize(e) for e in b.experts]


@pytest.mark.parametrize("seed", [0, 1])
def test_subspace_ablation_ordering_per_task(seed):
    fx = sgd_fixture(seed=seed)
    rep = subspace_ablation(fx.spec, fx.base, fx.experts, fx.tasks, 1000, 0)
    for i in range(fx.T):
        w1, w2, w23 = (rep[z].per_task_metric[i] for z in ("I", "II", "II_AND_III"))
        assert w1 <= w2 <= w23
        assert w23 >= 0.95 * rep["finetuned"].per_task_metric[i]
