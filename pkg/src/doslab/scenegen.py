"""Procedural labeled scenes with long-tail class frequencies.

Class 0 is a ground plane; every other class is a family of primitives
(boxes, cylinders, spheres) resting on it. Per-class point counts are drawn
from a multinomial whose probabilities follow ``k^-exponent`` over class rank,
so the expected class mass is an exact power law.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SHAPES = ("box", "cylinder", "sphere")


class PlacementError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    num_classes: int = 9
    exponent: float = 1.0
    num_points: int = 2048
    feature_dim: int = 6
    extent: float = 10.0
    noise: float = 3.0
    palette_scale: float = 1.0
    points_per_instance: int = 96
    max_instances: int = 6
    min_size: float = 0.4
    max_size: float = 1.4
    max_height: float = 2.5
    palette_seed: int = 7
    placement_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_points < self.num_classes:
            raise ValueError("num_points must be >= num_classes")
        if self.exponent < 0:
            raise ValueError("exponent must be >= 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


@dataclass
class LabeledCloud:
    positions: np.ndarray  # (N, 3) meters
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)

    def equals(self, other: "LabeledCloud") -> bool:
        return (np.array_equal(self.positions, other.positions)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


def class_shares(num_classes: int, exponent: float) -> np.ndarray:
    w = np.arange(1, num_classes + 1, dtype=np.float64) ** (-float(exponent))
    return w / w.sum()


def class_palette(cfg: SceneConfig) -> np.ndarray:
    """Prototype feature vector per class, shared by every scene."""
    rng = np.random.default_rng([cfg.palette_seed, cfg.num_classes, cfg.feature_dim])
    return cfg.palette_scale * rng.standard_normal((cfg.num_classes, cfg.feature_dim))


@dataclass
class _Shape:
    kind: str
    size: np.ndarray = field(default_factory=lambda: np.ones(3))

    def footprint(self) -> float:
        if self.kind == "box":
            return 0.5 * float(np.hypot(self.size[0], self.size[1]))
        return float(self.size[0])


def _class_shape(cfg: SceneConfig, c: int, rng: np.random.Generator) -> _Shape:
    kind = SHAPES[(c - 1) % len(SHAPES)]
    # size and height bands shift with the class index so shapes differ per class
    frac = (c - 1) / max(cfg.num_classes - 2, 1)
    lo = cfg.min_size + 0.5 * frac * (cfg.max_size - cfg.min_size)
    hi = lo + 0.5 * (cfg.max_size - cfg.min_size)
    if kind == "box":
        sx, sy = rng.uniform(lo, hi, 2)
        sz = rng.uniform(0.3, cfg.max_height) * (0.4 + 0.6 * (1 - frac))
        return _Shape(kind, np.array([sx, sy, sz]))
    if kind == "cylinder":
        r = 0.5 * rng.uniform(lo, hi)
        h = rng.uniform(0.5, cfg.max_height) * (0.5 + 0.5 * frac)
        return _Shape(kind, np.array([r, r, h]))
    r = 0.5 * rng.uniform(lo, hi)
    return _Shape(kind, np.array([r, r, 2 * r]))


def _sample_surface(shape: _Shape, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 3))
    if shape.kind == "box":
        sx, sy, sz = shape.size
        # top, +-x, +-y faces with area weighting; bottom rests on the ground
        areas = np.array([sx * sy, sy * sz, sy * sz, sx * sz, sx * sz])
        face = rng.choice(5, size=n, p=areas / areas.sum())
        u, v = rng.random(n), rng.random(n)
        p = np.empty((n, 3))
        p[:, 0] = (u - 0.5) * sx
        p[:, 1] = (v - 0.5) * sy
        p[:, 2] = sz
        side = face > 0
        w = rng.random(n) * sz
        p[side, 2] = w[side]
        for f, ax, sign in ((1, 0, 1), (2, 0, -1), (3, 1, 1), (4, 1, -1)):
            m = face == f
            p[m, ax] = 0.5 * sign * (sx if ax == 0 else sy)
        return p
    if shape.kind == "cylinder":
        r, _, h = shape.size
        areas = np.array([2 * np.pi * r * h, np.pi * r * r])
        top = rng.random(n) < areas[1] / areas.sum()
        theta = rng.random(n) * 2 * np.pi
        rad = np.where(top, r * np.sqrt(rng.random(n)), r)
        z = np.where(top, h, rng.random(n) * h)
        return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])
    r = shape.size[0]
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * r + np.array([0.0, 0.0, r])


def generate_scene(cfg: SceneConfig, seed=None) -> LabeledCloud:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c_count = cfg.num_classes
    counts = rng.multinomial(cfg.num_points, class_shares(c_count, cfg.exponent))
    palette = class_palette(cfg)

    placed: list[tuple[np.ndarray, float]] = []
    positions, labels = [], []
    margin = 0.5
    for c in range(1, c_count):
        if counts[c] == 0:
            continue
        n_inst = int(np.clip(round(counts[c] / cfg.points_per_instance), 1,
                             min(cfg.max_instances, counts[c])))
        shapes = [_class_shape(cfg, c, rng) for _ in range(n_inst)]
        weights = np.array([max(s.size.prod(), 1e-6) ** (2 / 3) for s in shapes])
        split = rng.multinomial(counts[c], weights / weights.sum())
        for shape, n in zip(shapes, split):
            rad = shape.footprint()
            if cfg.extent - 2 * (margin + rad) < 0:
                raise PlacementError(f"an instance of class {c} does not fit in the scene extent")
            for _ in range(cfg.placement_retries):
                xy = rng.uniform(margin + rad, cfg.extent - margin - rad, 2)
                if all(np.hypot(*(xy - q)) > rad + rq + 0.1 for q, rq in placed):
                    break
            else:
                raise PlacementError(f"could not place an instance of class {c} "
                                     f"after {cfg.placement_retries} retries")
            placed.append((xy, rad))
            local = _sample_surface(shape, int(n), rng)
            local[:, :2] += xy
            positions.append(local)
            labels.append(np.full(int(n), c))

    # ground: uniform over the plane, outside object footprints
    need, ground = int(counts[0]), []
    while need > 0:
        cand = np.column_stack([rng.uniform(0, cfg.extent, 2 * need + 8),
                                rng.uniform(0, cfg.extent, 2 * need + 8)])
        keep = np.ones(len(cand), bool)
        for q, rq in placed:
            keep &= np.hypot(cand[:, 0] - q[0], cand[:, 1] - q[1]) > rq
        cand = cand[keep][:need]
        ground.append(cand)
        need -= len(cand)
    g = np.concatenate(ground) if ground else np.zeros((0, 2))
    positions.insert(0, np.column_stack([g, np.zeros(len(g))]))
    labels.insert(0, np.zeros(len(g), dtype=np.int64))

    pos = np.concatenate(positions)
    lab = np.concatenate(labels).astype(np.int64)
    order = rng.permutation(len(lab))
    pos, lab = pos[order], lab[order]
    feat = palette[lab].copy()
    if cfg.noise > 0:
        feat += cfg.noise * rng.standard_normal(feat.shape)
    return LabeledCloud(pos, feat, lab)


def generate_dataset(cfg: SceneConfig, num_scenes: int, master_seed: int | None = None):
    master = cfg.seed if master_seed is None else master_seed
    return [generate_scene(cfg, np.random.default_rng([master, i])) for i in range(num_scenes)]


def class_counts(dataset, num_classes: int | None = None) -> np.ndarray:
    if not dataset:
        raise ValueError("empty dataset")
    c = num_classes or int(max(s.labels.max() for s in dataset)) + 1
    return sum(np.bincount(s.labels, minlength=c) for s in dataset)


def class_frequency_profile(dataset, num_classes: int | None = None) -> np.ndarray:
    """Per-class point counts summed over the dataset, sorted descending."""
    return np.sort(class_counts(dataset, num_classes))[::-1]


def head_common_tail(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class ids split into frequency-rank thirds, most frequent first."""
    order = np.argsort(-np.asarray(counts), kind="stable")
    c = len(order)
    base, rem = divmod(c, 3)
    sizes = [base, base, base]
    # the common third takes the remainder, as in 66/68/66
    sizes[1] += rem
    return order[:sizes[0]], order[sizes[0]:sizes[0] + sizes[1]], order[sizes[0] + sizes[1]:]


# --------------------------------------------------------------------------
# on-disk format


def export_scenes(dataset, directory, cfg: SceneConfig, master_seed: int = 0) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    d = dataset[0].features.shape[1] if dataset else cfg.feature_dim
    manifest = {
        "version": FORMAT_VERSION,
        "num_scenes": len(dataset),
        "C": cfg.num_classes,
        "d": d,
        "N": cfg.num_points,
        "generator": asdict(cfg),
        "master_seed": master_seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    header = ["x", "y", "z"] + [f"f{j}" for j in range(d)] + ["label"]
    for i, scene in enumerate(dataset):
        with open(out / f"scene_{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for p, f, lab in zip(scene.positions, scene.features, scene.labels):
                w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in f] + [int(lab)])
    return out


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise SceneFormatError(f"no manifest in {directory}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"manifest.json line {e.lineno}: {e.msg}") from e


def import_scenes(directory) -> list[LabeledCloud]:
    root = Path(directory)
    manifest = read_manifest(root)
    d, c = int(manifest["d"]), int(manifest["C"])
    expect = ["x", "y", "z"] + [f"f{j}" for j in range(d)] + ["label"]
    scenes = []
    for i in range(int(manifest["num_scenes"])):
        path = root / f"scene_{i}.csv"
        if not path.is_file():
            raise SceneFormatError(f"missing {path.name}")
        rows = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if lineno == 1:
                    if row != expect:
                        raise SceneFormatError(f"{path.name} line 1: header {row} does not match d={d}")
                    continue
                if len(row) != len(expect):
                    raise SceneFormatError(f"{path.name} line {lineno}: expected {len(expect)} "
                                           f"fields, got {len(row)}")
                try:
                    vals = [float(v) for v in row[:-1]]
                    lab = int(row[-1])
                except ValueError as e:
                    raise SceneFormatError(f"{path.name} line {lineno}: {e}") from e
                if not 0 <= lab < c:
                    raise SceneFormatError(f"{path.name} line {lineno}: label {lab} outside [0, {c})")
                rows.append(vals + [lab])
        arr = np.array(rows, dtype=np.float64).reshape(-1, len(expect))
        scenes.append(LabeledCloud(arr[:, :3].copy(), arr[:, 3:3 + d].copy(),
                                   arr[:, -1].astype(np.int64)))
    return scenes
