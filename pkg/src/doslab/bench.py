"""Benchmark suites behind the trend criteria: component ablation with a
random-init baseline, and the two-point Zipf tail comparison.

Results are cached as CSV next to a JSON sidecar holding the config digest,
seeds and variant names; a cache hit requires all three to match.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

from . import ablation
from .config import RunConfig

log = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parents[2]
CONFIGS = ROOT / "configs"
TAIL_ALPHAS = (0.0, 1.3)


def load_config(name: str) -> RunConfig:
    return RunConfig.load(CONFIGS / f"{name}.json")


def tail_variants() -> list[ablation.Variant]:
    return [v for v in ablation.suite_variants("zipf", RunConfig())
            if float(v.name.split("=")[1]) in TAIL_ALPHAS]


def _key(cfg: RunConfig, seeds, variants) -> dict:
    return {"digest": cfg.digest(), "seeds": list(seeds), "variants": [v.name for v in variants]}


def cached_suite(cfg: RunConfig, suite: str, seeds, out: Path,
                 variants: list[ablation.Variant] | None = None, refresh: bool = False) -> list[dict]:
    variants = variants if variants is not None else ablation.suite_variants(suite, cfg)
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    out = Path(out)
    meta = out.with_suffix(".json")
    key = _key(cfg, seeds, variants)
    if not refresh and out.exists() and meta.exists() and json.loads(meta.read_text()) == key:
        log.info("reusing %s", out)
        return [r for r in ablation.read_csv(out) if r["seed"] != "median"]

    def on_row(row):
        log.info("%s seed %s mIoU %.4f %s", row["variant"], row["seed"], row["mIoU"], row["status"])

    rows = ablation.run_suite(cfg, suite, seeds, variants=variants, on_row=on_row)
    ablation.write_csv(rows, out)
    meta.write_text(json.dumps(key, indent=2))
    return rows


def components(seeds=3, out=ROOT / "results" / "components.csv", refresh=False) -> list[dict]:
    return cached_suite(load_config("bench"), "components", seeds, out, refresh=refresh)


def zipf_tail(seeds=3, out=ROOT / "results" / "zipf_tail.csv", refresh=False) -> list[dict]:
    return cached_suite(load_config("longtail"), "zipf", seeds, out, tail_variants(), refresh)
