"""Command-line entry points.

Subcommands: gen-data, train-kaa, run-cal, eval, grad-check,
export-metrics. Every failure prints one machine-parseable JSON line to
stderr and exits 1; argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import losses, network, optim
from .accumulation import CycleTrainingConfig, run_accumulation
from .adaptation import AdaptationConfig, pools_from_bundle, run_adaptation
from .checkpoint import RunState, load_checkpoint, save_checkpoint
from .errors import BudgetError, ConfigurationError, MultisceneError
from .metrics import MetricsRow, export_metrics, rows_from_dicts, rows_to_dicts
from .synthetic import (GeneratorConfig, GroundTruthOracle, generate_bundle,
                        load_bundle, save_bundle)
from .tensor import Tensor, use_dtype


def _load_json_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{what} not found: {p}")
    return p


def cmd_gen_data(args) -> int:
    cfg = GeneratorConfig.from_dict(_load_json_config(args.config)) \
        if args.config else GeneratorConfig()
    bundle = generate_bundle(cfg, seed=args.seed)
    out = save_bundle(bundle, args.out)
    total = sum(len(s) for s in bundle.all_splits())
    print(f"wrote bundle with {total} examples to {out}")
    return 0


def cmd_train_kaa(args) -> int:
    bundle_dir = _require_dir(args.bundle, "bundle directory")
    data = load_bundle(bundle_dir)
    overrides = _load_json_config(args.config)
    if args.cycles is not None:
        overrides["cycles"] = args.cycles
    config = CycleTrainingConfig.from_dict(overrides) if overrides \
        else CycleTrainingConfig()
    result = run_accumulation(data, config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.foundation, RunState(cycle=result.stopped_cycle),
                    out / "foundation.kac", config_dict=config.to_dict())
    export_metrics(result.history, out / "metrics.csv")
    (out / "metrics.json").write_text(json.dumps(rows_to_dicts(result.history)))
    final_avg = result.traces["avg_val"][-1] if result.traces["avg_val"] else float("nan")
    print(f"trained {result.stopped_cycle} cycles (final avg val accuracy "
          f"{final_avg:.4f}); wrote {out / 'foundation.kac'}")
    return 0


def cmd_run_cal(args) -> int:
    ckpt = _require_dir(args.foundation, "foundation checkpoint")
    foundation, _ = load_checkpoint(ckpt)
    data = load_bundle(_require_dir(args.bundle, "bundle directory"))
    overrides = _load_json_config(args.config)
    sampler = {"cal": "consistency", "random": "random", "kcenter": "kcenter"}.get(
        args.sampler)
    if sampler is None:
        raise ConfigurationError(f"unknown sampler '{args.sampler}'")
    overrides["sampler"] = sampler
    if args.budgets:
        overrides["budgets"] = [int(b) for b in args.budgets.split(",")]
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    config = AdaptationConfig.from_dict(overrides)
    oracle = GroundTruthOracle(data, decline_rate=args.decline_rate, seed=args.seed)

    pools = pools_from_bundle(data, config.kappa, oracle, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.oracle == "serve":
            from .server import run_adaptation_with_service
            schema = [{"name": a.name, "classes": list(a.classes)}
                      for a in data.config.attributes]
            result = run_adaptation_with_service(
                foundation, pools, config, args.seed, static_dir=args.static_dir,
                port=args.port, schema=schema)
        else:
            result = run_adaptation(foundation, pools, oracle, config, seed=args.seed)
    except BudgetError as exc:
        if exc.history:
            export_metrics(exc.history, out / "metrics.csv")
        raise
    save_checkpoint(result.model, RunState(adaptation=len(result.curves["avg"]) - 1),
                    out / "adapted.kac", config_dict=config.to_dict())
    export_metrics(result.history, out / "metrics.csv")
    (out / "metrics.json").write_text(json.dumps(rows_to_dicts(result.history)))
    print(f"adaptation curve (avg accuracy): "
          f"{[round(a, 4) for a in result.curves['avg']]}")
    return 0


def cmd_eval(args) -> int:
    foundation, _ = load_checkpoint(_require_dir(args.checkpoint, "checkpoint"))
    data = load_bundle(_require_dir(args.bundle, "bundle directory"))
    if args.split == "joint":
        per_task, avg = losses.evaluate_accuracy(
            foundation, data.joint.images, data.joint.labels)
    else:
        per_task = {}
        for m, subset in enumerate(data.subsets, start=1):
            split = getattr(subset, args.split)
            accs, _ = losses.evaluate_accuracy(
                foundation, split.images, split.labels, tasks=[m])
            per_task[m] = accs[m]
        avg = float(np.mean(list(per_task.values())))
    rows = [MetricsRow(phase="eval", cycle_or_iter=0, task=str(m), split=args.split,
                       accuracy=acc, seed=args.seed)
            for m, acc in sorted(per_task.items())]
    rows.append(MetricsRow(phase="eval", cycle_or_iter=0, task="avg",
                           split=args.split, accuracy=avg, seed=args.seed))
    for m, acc in sorted(per_task.items()):
        print(f"task {m}: {acc:.4f}")
    print(f"average: {avg:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_metrics(rows, out / "metrics.csv")
    return 0


def cmd_grad_check(args) -> int:
    dtype = np.float64 if args.mode == "64" else np.float32
    tolerance = args.tolerance if args.tolerance is not None else (
        1e-6 if args.mode == "64" else 1e-4)
    with use_dtype(dtype):
        cfg = network.EncoderConfig(image_size=4, stage_channels=(4, 8, 16, 32))
        bundle = network.init_params(cfg, (3, 4), seed=args.seed)
        rng = np.random.default_rng(args.seed)
        x = Tensor(rng.random((3, 3, 4, 4)).astype(dtype), dtype=dtype)
        labels = np.array([[0, 2], [1, -1], [2, 3]])

        def loss_fn(params):
            emb = network.forward_embeddings(x, params, cfg)
            probs = [network.classify(emb[-1], params, m) for m in (1, 2)]
            l_cls = losses.batch_cross_entropy(probs[0], labels[:, 0])
            refs = [Tensor(np.zeros(e.shape, dtype=dtype), dtype=dtype) for e in emb]
            l_cst = losses.consistency_total(
                [losses.stage_consistency(e, r) for e, r in zip(emb, refs)])
            blended = losses.combined_loss(l_cls, l_cst, 0.6)
            return blended + losses.focal_multitask_loss(probs, labels)

        err = optim.finite_difference_check(loss_fn, bundle.params, seed=args.seed)
    print(f"max relative error: {err:.3e} (tolerance {tolerance:.0e})")
    return 0 if err <= tolerance else 1


def cmd_export_metrics(args) -> int:
    src = Path(args.history)
    if not src.exists():
        raise ConfigurationError(f"history file not found: {src}")
    rows = rows_from_dicts(json.loads(src.read_text()))
    export_metrics(rows, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiscene")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory or file")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset bundle")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-kaa", help="run the cyclical accumulation trainer")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--cycles", type=int, default=None)
    p.set_defaults(func=cmd_train_kaa)

    p = sub.add_parser("run-cal", help="run the active-learning adaptation loop")
    common(p)
    p.add_argument("--foundation", required=True, help="foundation checkpoint")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--sampler", choices=("cal", "random", "kcenter"), default="cal")
    p.add_argument("--oracle", choices=("auto", "serve"), default="auto")
    p.add_argument("--budgets", help="comma-separated per-iteration budgets")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--decline-rate", type=float, default=0.0)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--static-dir", default=None, help="annotation UI files to serve")
    p.set_defaults(func=cmd_run_cal)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "joint"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check on a toy model")
    common(p)
    p.add_argument("--mode", choices=("32", "64"), default="64")
    p.add_argument("--tolerance", type=float, default=None)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-metrics", help="convert a metrics JSON to CSV")
    common(p)
    p.add_argument("--history", required=True, help="metrics.json from a run")
    p.set_defaults(func=cmd_export_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MultisceneError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "IOError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
