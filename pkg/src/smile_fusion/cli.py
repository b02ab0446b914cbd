"""Command-line entry point: ``smile-fusion <subcommand> ...``.

Reports go to stdout (JSON or CSV), logs to stderr. Exit codes: 0 success,
2 usage/config/shape mismatch, 3 I/O or file format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_store, write_store
from .errors import ConfigError, SmileError, StoreError
from .harness import (
    Fixture,
    analytic_fixture,
    evaluate,
    fused_model,
    load_fixture,
    merged_model,
    save_fixture,
    sgd_fixture,
    smile_normalized_params,
)
from .linalg import svd
from .model import Model
from .smile import (
    SmileBundle,
    SmileConfig,
    _check_sources,
    assemble,
    delta_factors_for,
    linear_layer_names,
    param_summary,
    select_layers,
    upscale_model,
)
from .subspace import Zone, partition_of, zone_energies

log = logging.getLogger("smile_fusion")

METHODS = ("pretrained", "individual", "average", "task-arithmetic", "smile")


@dataclass
class CliConfig:
    subcommand: str
    k: int | None = None
    k_gate: int = 4
    top_k: int = 1
    layers: list[str] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    out: str | None = None
    seed: int = 0
    k_range: list[int] = field(default_factory=list)
    k_gate_range: list[int] = field(default_factory=list)
    top_k_range: list[int] = field(default_factory=list)

    @classmethod
    def from_args(cls, args) -> "CliConfig":
        cfg = cls(args.command)
        for name in ("k", "k_gate", "top_k", "out", "seed"):
            if hasattr(args, name):
                setattr(cfg, name, getattr(args, name))
        cfg.layers = _layer_patterns(getattr(args, "layers", None))
        if args.command == "upscale":
            cfg.inputs = [args.base, *args.experts]
        for name in ("k_range", "k_gate_range", "top_k_range"):
            if hasattr(args, name):
                setattr(cfg, name, parse_range(getattr(args, name)))
        return cfg

    def validate(self) -> None:
        """Reject settings no SMILE layer could accept, before any I/O."""
        if self.subcommand == "upscale":
            SmileConfig(self.k, self.k_gate, self.top_k, len(self.inputs) - 1)
        elif self.subcommand == "eval":
            if self.k is not None and self.k < 1:
                raise ConfigError(f"expert rank k must be >= 1, got {self.k}")
            if self.k_gate < 1 or self.top_k < 1:
                raise ConfigError("k_gate and top_k must be >= 1")
        elif self.subcommand == "sweep":
            low = min(self.k_range + self.k_gate_range + self.top_k_range)
            if low < 1:
                raise ConfigError(f"sweep ranges must be >= 1, got {low}")


def parse_range(text: str) -> list[int]:
    """``"1,2,8"`` or ``"1:4"`` (inclusive) or a mix, e.g. ``"1:3,8"``."""
    values = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if ":" in part:
                lo, hi = (int(x) for x in part.split(":", 1))
                values.extend(range(lo, hi + 1))
            else:
                values.append(int(part))
    except ValueError:
        raise ConfigError(f"bad integer range {text!r}") from None
    if not values:
        raise ConfigError(f"range {text!r} is empty")
    return sorted(set(values))


def _jobs_default() -> int:
    raw = os.environ.get("SMILE_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SMILE_JOBS must be an integer, got {raw!r}") from None


def _layer_patterns(values) -> list[str]:
    out = []
    for v in values or []:
        out.extend(p for p in v.split(",") if p)
    return out


def bundle_metadata_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_bundle(bundle: SmileBundle, path) -> int:
    n = write_store(bundle.to_store(), path)
    meta = dict(bundle.metadata(), warnings=bundle.warnings)
    try:
        bundle_metadata_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StoreError(f"cannot write bundle metadata: {exc}") from exc
    return n


def load_bundle(path) -> SmileBundle:
    meta_path = bundle_metadata_path(path)
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise StoreError(f"cannot read bundle metadata {meta_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StoreError(f"{meta_path} is not valid JSON: {exc}") from exc
    return SmileBundle.from_store(read_store(path), meta)


def _full_rank_k(deltas) -> int:
    return max([f.rank for d in deltas.values() for f in d.factors] + [1])


# --- subcommands ------------------------------------------------------------


def cmd_gen_fixtures(args) -> int:
    if args.kind == "analytic":
        fx = analytic_fixture(T=args.T, seed=args.seed, overlap_deg=args.overlap)
    else:
        fx = sgd_fixture(T=args.T, seed=args.seed)
    path = save_fixture(fx, args.out)
    print(json.dumps({"tasks": str(path), "T": fx.T, "kind": args.kind}, sort_keys=True))
    return 0


def cmd_upscale(args) -> int:
    base = read_store(args.base)
    experts = [read_store(p) for p in args.experts]
    cfg = SmileConfig(args.k, args.k_gate, args.top_k, len(experts))
    bundle = upscale_model(base, experts, _layer_patterns(args.layers), cfg, jobs=args.jobs)
    for w in bundle.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(param_summary(bundle.layer_shapes(), cfg))
    if args.out:
        n = save_bundle(bundle, args.out)
        log.info("wrote %s (%d bytes)", args.out, n)
    return 0


def analyze_layer(W: np.ndarray, dW: np.ndarray) -> dict:
    f = svd(W, "full")
    part = partition_of(f)
    energies = zone_energies(dW, f)
    total = energies["total"]
    fractions = {z.value: (energies[z.value] / total if total > 0 else 0.0) for z in Zone}
    return {
        "shape": list(W.shape),
        "rank": int(f.rank),
        "r": int(part.r),
        "r_half": int(part.r_half),
        "energies": energies,
        "fractions": fractions,
        "top_sigma": [float(s) for s in f.sigma[:10]],
    }


def cmd_analyze(args) -> int:
    base = read_store(args.base)
    expert = read_store(args.expert)
    _check_sources(base, [expert])
    names = select_layers(linear_layer_names(base), _layer_patterns(args.layers))
    if not names:
        raise ConfigError("no linear layers selected")
    report = {}
    for name in names:
        W = base.array(f"{name}.weight")
        report[name] = analyze_layer(W, expert.array(f"{name}.weight") - W)
    print(json.dumps({"layers": report}, indent=2, sort_keys=True))
    return 0


def _smile_for(fx: Fixture, args, deltas=None, cfg=None) -> SmileBundle:
    if getattr(args, "bundle", None):
        return load_bundle(args.bundle)
    if deltas is None:
        _check_sources(fx.base, fx.experts)
        layers = [l.name for l in fx.spec.linear_layers()]
        deltas = delta_factors_for(fx.base, fx.experts, layers, args.jobs)
    if cfg is None:
        k = args.k if args.k is not None else _full_rank_k(deltas)
        cfg = SmileConfig(k, args.k_gate, args.top_k, fx.T)
    return assemble(fx.base, deltas, cfg)


def run_eval(fx: Fixture, method: str, args):
    n, seed = args.samples, args.seed
    if method == "pretrained":
        return evaluate(Model.from_store(fx.spec, fx.base), fx.tasks, n, seed, method, 1.0)
    if method == "individual":
        models = [Model.from_store(fx.spec, e) for e in fx.experts]
        return evaluate(models, fx.tasks, n, seed, method, float(fx.T))
    if method in ("average", "task-arithmetic"):
        model = merged_model(fx.spec, fx.base, fx.experts, method, args.lam)
        return evaluate(model, fx.tasks, n, seed, method, 1.0)
    if method == "smile":
        bundle = _smile_for(fx, args)
        norm = smile_normalized_params(fx.base, bundle)
        return evaluate(fused_model(fx.spec, bundle), fx.tasks, n, seed, method, norm)
    raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def cmd_eval(args) -> int:
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    fx = load_fixture(args.tasks)
    report = run_eval(fx, args.method, args)
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    fx = load_fixture(args.tasks)
    _check_sources(fx.base, fx.experts)
    layers = [l.name for l in fx.spec.linear_layers()]
    deltas = delta_factors_for(fx.base, fx.experts, layers, args.jobs)
    grid = [
        SmileConfig(k, g, K, fx.T)
        for k in parse_range(args.k_range)
        for g in parse_range(args.k_gate_range)
        for K in parse_range(args.top_k_range)
    ]

    def point(cfg):
        bundle = assemble(fx.base, deltas, cfg)
        rep = evaluate(fused_model(fx.spec, bundle), fx.tasks, args.samples, args.seed, "smile")
        return rep.mean, bundle.added_params(), smile_normalized_params(fx.base, bundle)

    if args.jobs > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(point, grid))
    else:
        rows = [point(cfg) for cfg in grid]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "k_gate", "top_k", "mean_score", "added_params", "normalized_params"])
    for cfg, (mean, added, norm) in zip(grid, rows):
        writer.writerow([cfg.k, cfg.k_gate, cfg.top_k, repr(mean), added, repr(norm)])
    sys.stdout.write(buf.getvalue())
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smile-fusion", description="Zero-shot fusion of fine-tuned models into a sparse mixture of low-rank experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-fixtures", help="write a synthetic base/expert/task fixture")
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=("analytic", "sgd"), default="analytic")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--T", type=int, default=4)
    g.add_argument("--overlap", type=float, default=0.0, help="tilt of task subspaces in degrees")
    g.set_defaults(func=cmd_gen_fixtures)

    u = sub.add_parser("upscale", help="fuse a base and expert checkpoints into a SMILE bundle")
    u.add_argument("base")
    u.add_argument("experts", nargs="+")
    u.add_argument("--k", type=int, required=True)
    u.add_argument("--k-gate", type=int, default=4)
    u.add_argument("--top-k", type=int, default=1)
    u.add_argument("--layers", action="append", help="glob over layer names; repeatable or comma separated")
    u.add_argument("--out")
    u.add_argument("--jobs", type=int, default=None)
    u.set_defaults(func=cmd_upscale)

    a = sub.add_parser("analyze", help="zone energy report of one expert's deltas")
    a.add_argument("base")
    a.add_argument("expert")
    a.add_argument("--layers", action="append")
    a.set_defaults(func=cmd_analyze)

    def eval_flags(q):
        q.add_argument("tasks", help="tasks.json written by gen-fixtures")
        q.add_argument("--samples", type=int, default=1000)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--jobs", type=int, default=None)

    e = sub.add_parser("eval", help="score one fusion method on a fixture")
    eval_flags(e)
    e.add_argument("--method", required=True, help=f"one of {', '.join(METHODS)}")
    e.add_argument("--bundle", help="saved SMILE bundle (method smile)")
    e.add_argument("--k", type=int, default=None, help="expert rank (default: full delta rank)")
    e.add_argument("--k-gate", type=int, default=4)
    e.add_argument("--top-k", type=int, default=1)
    e.add_argument("--lambda", dest="lam", type=float, default=0.3)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="CSV grid over k, k_gate and top-K")
    eval_flags(s)
    s.add_argument("--k-range", required=True)
    s.add_argument("--k-gate-range", default="4")
    s.add_argument("--top-k-range", default="1")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if hasattr(args, "jobs") and args.jobs is None:
            args.jobs = _jobs_default()
        if hasattr(args, "jobs") and args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        CliConfig.from_args(args).validate()
        return args.func(args)
    except SmileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
