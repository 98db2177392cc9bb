"""Command-line entry point: data generation, training, eval, diagnostics.

Every run writes an isolated directory: manifest.json (enough to re-run),
config.json, metrics.jsonl, checkpoints/, reports/. Exit codes: 0 success,
2 usage or validation error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data as datamod
from . import diagnostics, trainer
from .numcore import derive_seed

SWEEP_KEYS = ("experts", "layers")


def _out_root() -> Path:
    return Path(os.environ.get("MOELAB_OUT_ROOT", "runs"))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, args_ns, config=None, dataset_digest=None, layout=None) -> dict:
    return {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "dataset_digest": dataset_digest,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "layout": layout or {},
    }


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    dataset = datamod.generate_conflict_dataset(
        num_tasks=args.tasks,
        samples_per_task=args.per_task,
        vocab_size=args.vocab,
        seed=args.seed,
        seq_len=args.seq_len,
        distractor_pool=args.distractors,
    )
    out = Path(args.out)
    datamod.save_jsonl(out, dataset)
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    print(f"wrote {len(dataset.records)} records to {out}")
    print(f"digest {digest}")
    return 0


# ---------------------------------------------------------------------------
# train


def _resolve_config(args) -> trainer.TrainConfig:
    base: dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
        if not isinstance(base, dict):
            raise ValueError(f"{args.config}: config file must hold a JSON object")
    overrides = {
        "adapter": args.adapter,
        "num_experts": args.experts,
        "t_warmup": args.t_warmup,
        "loss": args.loss,
        "seed": args.seed,
        "total_steps": args.steps,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "rank": args.rank,
        "alpha": args.alpha,
        "tau": args.tau,
        "layer_coverage": args.layer_coverage,
        "w_min": args.w_min,
        "w_max": args.w_max,
        "sigma": args.sigma,
    }
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
    config = trainer.TrainConfig.from_dict(base)
    if config.loss == "infonce" and any(
        v is not None for v in (args.w_min, args.w_max, args.sigma)
    ):
        print("warning: --loss infonce ignores the negative-weighting parameters",
              file=sys.stderr)
    return config


def _train_one(config: trainer.TrainConfig, dataset, out_dir: Path, args) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "reports").mkdir(exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json() + "\n")
    _write_json(out_dir / "manifest.json", _manifest(
        "train", args,
        config=json.loads(config.to_json()),
        dataset_digest=dataset.digest(),
        layout={"config": "config.json", "metrics": "metrics.jsonl",
                "checkpoints": "checkpoints/", "reports": "reports/"},
    ))
    state, metrics = trainer.run(
        config, dataset, out_dir=out_dir,
        checkpoint_every=args.checkpoint_every,
        resume_from=args.resume,
    )
    final_loss = metrics[-1]["loss"] if metrics else float("nan")
    print(f"{out_dir}: {len(metrics)} steps, final loss {final_loss:.6f}")


def _parse_sweep(spec: str) -> tuple[str, list[float]]:
    if "=" not in spec:
        raise ValueError("--sweep expects key=v1,v2,... (keys: experts, layers)")
    key, _, values = spec.partition("=")
    key = key.strip()
    if key not in SWEEP_KEYS:
        raise ValueError(f"unknown sweep key {key!r}; choose from {SWEEP_KEYS}")
    try:
        parsed = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise ValueError(f"bad sweep values {values!r}") from exc
    if not parsed:
        raise ValueError("sweep needs at least one value")
    return key, parsed


def cmd_train(args) -> int:
    dataset = datamod.load_jsonl(args.data)
    if args.task_filter is not None:
        dataset = dataset.restrict_to_task(args.task_filter)
    config = _resolve_config(args)
    out = Path(args.out) if args.out else _out_root() / f"train-{config.digest().hex()[:10]}"

    if not args.sweep:
        _train_one(config, dataset, out, args)
        return 0

    key, values = _parse_sweep(args.sweep)
    for value in values:
        if key == "experts":
            cfg = trainer.TrainConfig.from_dict(
                {**json.loads(config.to_json()), "num_experts": int(value),
                 "seed": derive_seed(config.seed, f"sweep:experts={int(value)}") % (2 ** 31)}
            )
            run_dir = out / f"experts-{int(value)}"
        else:
            cfg = trainer.TrainConfig.from_dict(
                {**json.loads(config.to_json()), "layer_coverage": value / 100.0,
                 "seed": derive_seed(config.seed, f"sweep:layers={value}") % (2 ** 31)}
            )
            run_dir = out / f"layers-{int(value)}"
        _train_one(cfg, dataset, run_dir, args)
    return 0


# ---------------------------------------------------------------------------
# eval


def _run_dir_of_checkpoint(ckpt: Path) -> Path:
    return ckpt.parent.parent


def _config_for_checkpoint(args) -> trainer.TrainConfig:
    if args.config:
        return trainer.TrainConfig.from_json(Path(args.config).read_text())
    candidate = _run_dir_of_checkpoint(Path(args.checkpoint)) / "config.json"
    if not candidate.exists():
        raise ValueError(
            f"cannot locate config.json near {args.checkpoint}; pass --config"
        )
    return trainer.TrainConfig.from_json(candidate.read_text())


def cmd_eval(args) -> int:
    config = _config_for_checkpoint(args)
    state = trainer.load_checkpoint(args.checkpoint, config)
    dataset = datamod.load_jsonl(args.data)
    k_values = [int(k) for k in args.k.split(",") if k.strip()]
    result = datamod.evaluate(state.encoder, dataset, k_values=k_values)
    report = result.to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
    else:
        ckpt = Path(args.checkpoint)
        out = _run_dir_of_checkpoint(ckpt) / "reports" / f"eval-{ckpt.stem}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n")
    return 0


# ---------------------------------------------------------------------------
# diagnose


def _run_checkpoints(run_dir: Path) -> list[Path]:
    ckpts = sorted((run_dir / "checkpoints").glob("step*.ckpt"))
    if not ckpts:
        raise ValueError(f"{run_dir}: no checkpoints found")
    return ckpts


def _run_config(run_dir: Path) -> trainer.TrainConfig:
    cfg = run_dir / "config.json"
    if not cfg.exists():
        raise ValueError(f"{run_dir}: missing config.json")
    return trainer.TrainConfig.from_json(cfg.read_text())


def _diag_trajectory(runs: list[Path], out_dir: Path) -> None:
    groups: dict[str, np.ndarray] = {}
    steps: dict[str, list[int]] = {}
    for run in runs:
        vectors = []
        run_steps = []
        for ckpt in _run_checkpoints(run):
            _, records = trainer.read_checkpoint_records(ckpt)
            vectors.append(diagnostics.adapter_vector(records))
            run_steps.append(int(records["meta.step"][0]))
        groups[run.name] = np.stack(vectors)
        steps[run.name] = run_steps
    proj = diagnostics.pca_project(groups)
    lines = ["run,step,pc1,pc2"]
    for name, pts in proj.points.items():
        for step, (x, y) in zip(steps[name], pts):
            lines.append(f"{name},{step},{x:.10g},{y:.10g}")
    (out_dir / "trajectory.csv").write_text("\n".join(lines) + "\n")
    print(f"explained_variance {proj.explained_variance:.6f}"
          + (" (degenerate)" if proj.degenerate else ""))


def _diag_similarity(runs: list[Path], out_dir: Path) -> None:
    if len(runs) != 2:
        raise ValueError("similarity mode needs exactly 2 run directories")
    states = []
    for run in runs:
        config = _run_config(run)
        states.append(trainer.load_checkpoint(_run_checkpoints(run)[-1], config))
    profile = diagnostics.layer_cosine(states[0].encoder, states[1].encoder)
    lines = ["layer,cosine"]
    for layer, val in enumerate(profile.values):
        lines.append(f"{layer},{'' if val is None else format(val, '.10g')}")
    (out_dir / "similarity.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out_dir / 'similarity.csv'}")


def _diag_utilization(runs: list[Path], out_dir: Path, dataset) -> None:
    for run in runs:
        config = _run_config(run)
        state = trainer.load_checkpoint(_run_checkpoints(run)[-1], config)
        report = diagnostics.expert_utilization(
            state.encoder, dataset,
            layer_coverage=config.layer_coverage,
            pooling=config.signature_pooling,
        )
        _write_json(out_dir / f"utilization-{run.name}.json", report)
        print(f"wrote {out_dir / f'utilization-{run.name}.json'}")


def _diag_convergence(runs: list[Path], out_dir: Path, dataset) -> None:
    series: dict[str, list[tuple[int, float]]] = {}
    for run in runs:
        config = _run_config(run)
        for ckpt in _run_checkpoints(run):
            state = trainer.load_checkpoint(ckpt, config)
            result = datamod.evaluate(state.encoder, dataset, k_values=(1,))
            step = int(state.step)
            for task, metrics in result.per_task.items():
                series.setdefault(f"{run.name}:task{task}", []).append(
                    (step, metrics["hit@1"])
                )
    csv = diagnostics.convergence_export(series, resample=True)
    (out_dir / "convergence.csv").write_text(csv)
    print(f"wrote {out_dir / 'convergence.csv'}")


def cmd_diagnose(args) -> int:
    runs = [Path(r) for r in args.runs]
    for run in runs:
        if not run.is_dir():
            raise ValueError(f"{run}: not a run directory")
    out_dir = Path(args.out) if args.out else _out_root() / "diagnostics"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.mode in ("utilization", "convergence"):
        if not args.data:
            raise ValueError(f"mode {args.mode} requires --data")
        dataset = datamod.load_jsonl(args.data)
    if args.mode == "trajectory":
        _diag_trajectory(runs, out_dir)
    elif args.mode == "similarity":
        _diag_similarity(runs, out_dir)
    elif args.mode == "utilization":
        _diag_utilization(runs, out_dir, dataset)
    else:
        _diag_convergence(runs, out_dir, dataset)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Train and probe mixture-of-adapters embedding models at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic task-conflict dataset")
    g.add_argument("--tasks", type=int, required=True)
    g.add_argument("--per-task", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--vocab", type=int, default=256)
    g.add_argument("--seq-len", type=int, default=8)
    g.add_argument("--distractors", type=int, default=16)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train adapters on a pair dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON config file; flags override file keys")
    t.add_argument("--out")
    t.add_argument("--adapter", choices=trainer.ADAPTER_KINDS)
    t.add_argument("--experts", type=int)
    t.add_argument("--t-warmup", type=int, dest="t_warmup")
    t.add_argument("--loss", choices=trainer.LOSS_KINDS)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--rank", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--layer-coverage", type=float)
    t.add_argument("--w-min", type=float, dest="w_min")
    t.add_argument("--w-max", type=float, dest="w_max")
    t.add_argument("--sigma", type=float)
    t.add_argument("--task-filter", type=int,
                   help="train on a single task's records")
    t.add_argument("--checkpoint-every", type=int, default=100)
    t.add_argument("--resume", help="checkpoint file to resume from")
    t.add_argument("--sweep", help="key=v1,v2,... one run per value (experts, layers)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", default="1,5")
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="run post-hoc analyses over run directories")
    d.add_argument("--runs", nargs="+", required=True)
    d.add_argument("--mode", required=True,
                   choices=("trajectory", "similarity", "utilization", "convergence"))
    d.add_argument("--out")
    d.add_argument("--data")
    d.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, RuntimeError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
