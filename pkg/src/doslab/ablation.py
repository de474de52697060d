"""Ablation suites: grids of run configurations trained and probed on one
shared dataset, one CSV row per (variant, seed) plus per-variant medians."""
from __future__ import annotations

import csv
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .probe import linear_probe
from .scenegen import generate_dataset
from .trainer import init_state, pretrain

log = logging.getLogger(__name__)

ZIPF_GRID = (0.0, 0.1, 0.3, 0.6, 0.9, 1.3, 1.6, 2.0, 3.0)
PROTO_GRID = (8, 32, 64, 256)
COLUMNS = ("variant", "seed", "mIoU", "mAcc", "head_mIoU", "common_mIoU", "tail_mIoU",
           "status", "error")


@dataclass
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)
    pretrain: bool = True


def _components() -> list[Variant]:
    cl = {"mode": "clustering"}
    return [
        Variant("random_init", pretrain=False),
        Variant("masked_naive", {"train": {"supervision": "masked_naive"}, "objective": cl}),
        Variant("masked_jitter", {"train": {"supervision": "masked_jitter"}, "objective": cl}),
        Variant("observable+clustering", {"objective": cl}),
        Variant("observable+feature_regression", {"objective": {"mode": "feature_regression"}}),
        Variant("observable+softmap", {"objective": {"mode": "softmap_uniform"}}),
        Variant("observable+softmap+zipf", {"objective": {"mode": "softmap_zipf"}}),
    ]


def _zipf() -> list[Variant]:
    return [Variant(f"alpha={a:g}", {"objective": {"mode": "softmap_zipf"},
                                     "transport": {"alpha": a, "alpha_final": None}})
            for a in ZIPF_GRID]


def _protos() -> list[Variant]:
    out = []
    for mode, label in (("clustering", "clustering"), ("softmap_uniform", "softmap"),
                        ("softmap_zipf", "softmap+zipf")):
        for k in PROTO_GRID:
            out.append(Variant(f"{label}/K={k}", {"objective": {"mode": mode},
                                                 "train": {"num_prototypes": k}}))
    return out


def _crossview(base: RunConfig) -> list[Variant]:
    # without the cross-view term, batch and epochs double to match compute
    t = base.train
    return [
        Variant("full", {"objective": {"cross_view": True}}),
        Variant("no_cross_view", {"objective": {"cross_view": False},
                                  "train": {"batch_size": 2 * t.batch_size, "epochs": 2 * t.epochs}}),
    ]


SUITES = ("components", "zipf", "protos", "crossview")


def suite_variants(suite: str, base: RunConfig) -> list[Variant]:
    if suite == "components":
        return _components()
    if suite == "zipf":
        return _zipf()
    if suite == "protos":
        return _protos()
    if suite == "crossview":
        return _crossview(base)
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


def variant_config(base: RunConfig, variant: Variant, seed: int) -> RunConfig:
    over = {k: dict(v) for k, v in variant.overrides.items()}
    over.setdefault("train", {})["seed"] = seed
    over.setdefault("probe", {})["seed"] = seed
    return base.override(**over)


def run_variant(base: RunConfig, variant: Variant, seed: int, dataset) -> dict:
    """Train (unless the variant is a baseline) and probe; never raises."""
    row = {"variant": variant.name, "seed": seed}
    try:
        cfg = variant_config(base, variant, seed)
        if variant.pretrain:
            state, _ = pretrain(cfg, dataset)
        else:
            state = init_state(cfg)
        params = state.teacher if cfg.probe.params == "teacher" else state.student
        res = linear_probe(params, dataset, cfg.encoder, cfg.train.voxel_size,
                           cfg.scene.num_classes, cfg.probe.iters, cfg.probe.lr,
                           cfg.probe.train_fraction, cfg.probe.seed)
        head, common, tail = res.head_common_tail
        row.update(mIoU=res.miou, mAcc=res.macc, head_mIoU=head, common_mIoU=common,
                   tail_mIoU=tail, status="ok", error="")
    except Exception as e:  # noqa: BLE001 - a failed row must not stop the suite
        log.error("variant %s seed %d failed: %s", variant.name, seed, e)
        log.debug("%s", traceback.format_exc())
        row.update(mIoU=math.nan, mAcc=math.nan, head_mIoU=math.nan, common_mIoU=math.nan,
                   tail_mIoU=math.nan, status="failed", error=f"{type(e).__name__}: {e}")
    return row


def _job(args):
    base_doc, variant, seed, dataset = args
    return run_variant(RunConfig.from_dict(base_doc), variant, seed, dataset)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DOS_THREADS", "1")))
    except ValueError:
        return 1


def run_suite(base: RunConfig, suite: str, seeds, dataset=None,
              variants: list[Variant] | None = None, workers: int | None = None,
              on_row=None) -> list[dict]:
    """Rows sorted by (variant order, seed). Data is generated once from the
    scene seed so every variant sees the same scenes."""
    variants = variants if variants is not None else suite_variants(suite, base)
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if dataset is None:
        dataset = generate_dataset(base.scene, base.num_scenes, base.scene.seed)
    jobs = [(v, s) for v in variants for s in seeds]
    workers = workers or worker_count()
    rows = []
    if workers <= 1:
        for v, s in jobs:
            rows.append(run_variant(base, v, s, dataset))
            if on_row:
                on_row(rows[-1])
    else:
        doc = base.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_job, [(doc, v, s, dataset) for v, s in jobs]):
                rows.append(row)
                if on_row:
                    on_row(row)
    order = {v.name: i for i, v in enumerate(variants)}
    rows.sort(key=lambda r: (order[r["variant"]], r["seed"]))
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Median of each metric per variant over successful seeds."""
    names = list(dict.fromkeys(r["variant"] for r in rows))
    out = []
    for name in names:
        ok = [r for r in rows if r["variant"] == name and r["status"] == "ok"]
        rec = {"variant": name, "seed": "median"}
        for col in COLUMNS[2:7]:
            rec[col] = float(np.median([r[col] for r in ok])) if ok else math.nan
        failed = sum(r["variant"] == name and r["status"] != "ok" for r in rows)
        rec["status"] = "ok" if ok else "failed"
        rec["error"] = f"{failed} failed seed(s)" if failed else ""
        out.append(rec)
    return out


def write_csv(rows: list[dict], path, summary: bool = True) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows + (summarize(rows) if summary else []):
            w.writerow({k: r.get(k, "") for k in COLUMNS})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for col in COLUMNS[2:7]:
            r[col] = float(r[col]) if r[col] not in ("", None) else math.nan
    return rows


def medians(rows: list[dict], column: str = "mIoU") -> dict[str, float]:
    return {r["variant"]: r[column] for r in summarize(rows)}
