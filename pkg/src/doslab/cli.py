"""Command-line entry point: ``python -m doslab <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime failure. Diagnostics go
to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import ablation, numerics as nx, transport
from .config import ConfigError, RunConfig
from .probe import linear_probe
from .scenegen import SceneFormatError, export_scenes, generate_dataset, import_scenes, read_manifest
from .trainer import CheckpointError, init_state, load_checkpoint, pretrain, step_loss_fn

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    """Bad arguments or inputs detected before any work starts."""


def emit(level: str, event: str, **fields) -> None:
    rec = {"level": level, "event": event, "time": round(time.time(), 3)}
    rec.update(fields)
    print(json.dumps(rec, default=str), file=sys.stderr, flush=True)


def _config(path) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def _dataset(path: str, cfg: RunConfig):
    manifest = read_manifest(path)
    if manifest.get("d") != cfg.scene.feature_dim or manifest.get("C") != cfg.scene.num_classes:
        raise UsageError(f"dataset (d={manifest.get('d')}, C={manifest.get('C')}) does not match "
                         f"config scene.feature_dim {cfg.scene.feature_dim} / "
                         f"num_classes {cfg.scene.num_classes}")
    return import_scenes(path)


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    seed = cfg.scene.seed if args.seed is None else args.seed
    data = generate_dataset(cfg.scene, cfg.num_scenes, seed)
    export_scenes(data, args.out, cfg.scene, seed)
    emit("info", "gen_data", out=str(args.out), num_scenes=len(data), seed=seed)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    ckpt, metrics = out / "checkpoint.json", out / "metrics.jsonl"
    if args.resume:
        if not ckpt.exists():
            raise UsageError(f"--resume given but {ckpt} does not exist")
        state, cfg = load_checkpoint(ckpt)
        if args.config is not None and _config(args.config).digest() != cfg.digest():
            raise UsageError("config differs from the checkpoint's config")
        # drop log lines past the checkpoint so the log matches the state
        if metrics.exists():
            lines = metrics.read_text().splitlines()[:state.step]
            metrics.write_text("".join(line + "\n" for line in lines))
    else:
        cfg, state = _config(args.config), None
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        metrics.write_text("")
    data = _dataset(args.data, cfg)
    emit("info", "pretrain_start", config_hash=cfg.digest(), scenes=len(data),
         resume_step=0 if state is None else state.step)
    state, recs = pretrain(cfg, data, state, metrics_path=metrics, checkpoint_path=ckpt,
                           max_steps=args.max_steps)
    emit("info", "pretrain_done", steps=state.step, checkpoint=str(ckpt),
         final_loss=recs[-1]["loss_total"] if recs else None)
    return EXIT_OK


def cmd_probe(args) -> int:
    state, cfg = load_checkpoint(args.ckpt)
    data = _dataset(args.data, cfg)
    which = args.params or cfg.probe.params
    params = state.teacher if which == "teacher" else state.student
    res = linear_probe(params, data, cfg.encoder, cfg.train.voxel_size, cfg.scene.num_classes,
                       cfg.probe.iters, cfg.probe.lr, cfg.probe.train_fraction, cfg.probe.seed)
    doc = {"config_hash": cfg.digest(), "checkpoint": str(args.ckpt), "params": which}
    doc.update(res.to_dict())
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, indent=2))
    emit("info", "probe", mIoU=res.miou, out=str(args.out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    if args.suite not in ablation.SUITES:
        raise UsageError(f"unknown suite {args.suite!r}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    data = _dataset(args.data, cfg) if args.data else None

    def on_row(row):
        emit("info" if row["status"] == "ok" else "error", "ablate_row",
             **{k: row[k] for k in ("variant", "seed", "mIoU", "status", "error")})

    rows = ablation.run_suite(cfg, args.suite, args.seeds, data, on_row=on_row)
    ablation.write_csv(rows, args.out)
    failed = sum(r["status"] != "ok" for r in rows)
    emit("info", "ablate_done", rows=len(rows), failed=failed, out=str(args.out))
    return EXIT_OK if failed < len(rows) else EXIT_RUNTIME


def cmd_sinkhorn(args) -> int:
    if args.n < 1 or args.k < 1 or args.iters < 1 or args.alpha < 0:
        raise UsageError("need n, k, iters >= 1 and alpha >= 0")
    rng = np.random.default_rng(args.seed)
    sim = rng.uniform(0.05, 1.0, (args.n, args.k))
    prior = transport.zipf_prior(args.k, args.alpha)
    plan = transport.sinkhorn_plan(sim, prior.weights, args.iters)
    soft = transport.column_normalize(plan)
    doc = transport.sinkhorn_diagnostics(plan, prior.weights)
    doc.update(n=args.n, k=args.k, alpha=args.alpha, iters=args.iters, seed=args.seed,
               column_sums_max_error=float(np.max(np.abs(soft.sum(axis=0) - 1.0))),
               column_marginals=plan.sum(axis=0).tolist(), prior=prior.weights.tolist())
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    data = generate_dataset(cfg.scene, max(1, min(cfg.num_scenes, cfg.train.batch_size)),
                            cfg.scene.seed)
    state = init_state(cfg)
    batch = list(enumerate(data))
    fn = step_loss_fn(state, batch, cfg, total_steps=max(1, cfg.train.epochs))
    report = nx.grad_check(fn, state.student, eps=args.eps)
    worst = max(report.values())
    doc = {"eps": args.eps, "max_rel_error": worst, "per_array": report,
           "passed": bool(worst < args.tol)}
    print(json.dumps(doc, indent=2))
    return EXIT_OK if doc["passed"] else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doslab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate and export a scene dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("probe", help="linear probe on frozen features")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--params", choices=("teacher", "student"))
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("ablate", help="run an ablation suite")
    s.add_argument("--suite", required=True)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("sinkhorn", help="Zipf-Sinkhorn diagnostics on random similarities")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--alpha", type=float, default=1.3)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sinkhorn)

    s = sub.add_parser("gradcheck", help="finite-difference check of one training step")
    s.add_argument("--config")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        return args.fn(args)
    except ConfigError as e:
        for pointer, msg in e.problems:
            emit("error", "config_invalid", pointer=pointer, message=msg)
        return EXIT_INVALID
    except (UsageError, SceneFormatError, FileNotFoundError) as e:
        emit("error", "invalid_input", message=str(e))
        return EXIT_INVALID
    except CheckpointError as e:
        emit("error", "checkpoint", message=str(e))
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - top-level boundary
        emit("error", "runtime", kind=type(e).__name__, message=str(e))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
