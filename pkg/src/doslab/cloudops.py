"""Two-view construction, block masking, voxel pooling and cross-view
correspondence for labeled point clouds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .scenegen import LabeledCloud

_OFF = 1 << 20
_BITS = 21


class CropError(RuntimeError):
    pass


class MaskError(ValueError):
    pass


@dataclass
class AugConfig:
    crop_fraction: float = 0.8
    rotation: float = np.pi  # max |angle| about the vertical axis
    scale_low: float = 0.9
    scale_high: float = 1.1
    position_jitter: float = 0.01
    feature_jitter: float = 1.5
    min_points: int = 16
    retries: int = 10

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must be in (0, 1]")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("need 0 < scale_low <= scale_high")


@dataclass
class View:
    parent: np.ndarray  # indices into the source cloud, strictly increasing
    positions: np.ndarray
    features: np.ndarray
    original: np.ndarray  # pre-augmentation positions

    def __len__(self):
        return len(self.parent)


@dataclass
class MaskSpec:
    visible: np.ndarray  # local indices, sorted
    ratio: float  # achieved, over points
    requested: float
    block_size: float
    seed: int | None = None

    def masked(self, n: int) -> np.ndarray:
        keep = np.ones(n, bool)
        keep[self.visible] = False
        return np.flatnonzero(keep)


def _keys(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.int64) + _OFF
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def rotate_scale(pos: np.ndarray, angle: float, scale: float, center: np.ndarray) -> np.ndarray:
    """Rotate about the vertical axis through ``center`` and scale about it."""
    if angle == 0 and scale == 1:
        return pos.copy()  # exact identity, no round trip through center
    c, s = np.cos(angle), np.sin(angle)
    rel = pos - center
    out = np.empty_like(pos)
    out[:, 0] = c * rel[:, 0] - s * rel[:, 1]
    out[:, 1] = s * rel[:, 0] + c * rel[:, 1]
    out[:, 2] = rel[:, 2]
    return out * scale + center


def crop(cloud: LabeledCloud, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices inside the smallest square column (in xy) around a random point
    that holds ``round(fraction * N)`` points."""
    n = len(cloud)
    keep = max(1, int(round(fraction * n)))
    if keep >= n:
        return np.arange(n)
    anchor = cloud.positions[rng.integers(n), :2]
    d = np.max(np.abs(cloud.positions[:, :2] - anchor), axis=1)
    return np.sort(np.argsort(d, kind="stable")[:keep])


def make_view(cloud: LabeledCloud, aug: AugConfig, rng: np.random.Generator) -> View:
    for _ in range(aug.retries):
        idx = crop(cloud, aug.crop_fraction, rng)
        if len(idx) >= min(aug.min_points, len(cloud)):
            break
    else:
        raise CropError(f"crop kept fewer than {aug.min_points} points after {aug.retries} tries")
    orig = cloud.positions[idx]
    angle = rng.uniform(-aug.rotation, aug.rotation) if aug.rotation else 0.0
    scale = rng.uniform(aug.scale_low, aug.scale_high)
    center = orig.mean(axis=0) * np.array([1.0, 1.0, 0.0])
    pos = rotate_scale(orig, angle, scale, center)
    if aug.position_jitter:
        pos = pos + aug.position_jitter * rng.standard_normal(pos.shape)
    feat = cloud.features[idx]
    if aug.feature_jitter:
        feat = feat + aug.feature_jitter * rng.standard_normal(feat.shape)
    return View(idx, pos, feat.copy(), orig.copy())


def make_views(cloud: LabeledCloud, aug: AugConfig, seed) -> tuple[View, View]:
    if len(cloud) == 0:
        raise CropError("empty cloud")
    rng = np.random.default_rng(seed)
    return make_view(cloud, aug, rng), make_view(cloud, aug, rng)


def block_mask(view: View, ratio: float, block_size: float, seed=None) -> MaskSpec:
    """Mask whole cubic blocks, in random order, until the masked point
    fraction first reaches ``ratio``."""
    if not 0 <= ratio < 1:
        raise MaskError("mask ratio must be in [0, 1)")
    if not block_size > 0:
        raise MaskError("block size must be positive")
    n = len(view)
    if ratio == 0 or n == 0:
        return MaskSpec(np.arange(n), 0.0, ratio, block_size, seed)
    keys = _keys(np.floor(view.positions / block_size))
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    order = np.random.default_rng(seed).permutation(len(uniq))
    masked_frac = np.cumsum(counts[order]) / n
    stop = int(np.searchsorted(masked_frac, ratio - 1e-12))
    if stop >= len(uniq) - 1:
        raise MaskError("mask ratio leaves no visible points")
    hidden = np.zeros(len(uniq), bool)
    hidden[order[:stop + 1]] = True
    visible = np.flatnonzero(~hidden[inv])
    return MaskSpec(visible, 1.0 - len(visible) / n, ratio, block_size, seed)


@dataclass
class VoxelGrid:
    voxel_size: float
    coords: np.ndarray  # (V, 3) int
    inverse: np.ndarray  # point -> voxel row
    counts: np.ndarray
    features: np.ndarray  # (V, d + 3): mean feature, mean offset from center
    centers: np.ndarray

    def __len__(self):
        return len(self.coords)

    @property
    def keys(self) -> np.ndarray:
        return _keys(self.coords)

    def members(self) -> dict[tuple, np.ndarray]:
        order = np.argsort(self.inverse, kind="stable")
        splits = np.split(order, np.cumsum(self.counts)[:-1])
        return {tuple(c): m for c, m in zip(self.coords.tolist(), splits)}

    def pooling(self) -> sp.csr_matrix:
        """V x N matrix averaging point rows into voxel rows."""
        n = len(self.inverse)
        return sp.csr_matrix((1.0 / self.counts[self.inverse], (self.inverse, np.arange(n))),
                             shape=(len(self), n))


def voxelize(positions: np.ndarray, features: np.ndarray, voxel_size: float) -> VoxelGrid:
    if not voxel_size > 0:
        raise ValueError("voxel size must be positive")
    coords_all = np.floor(positions / voxel_size).astype(np.int64)
    uniq, first, inv, counts = np.unique(_keys(coords_all), return_index=True,
                                         return_inverse=True, return_counts=True)
    coords = coords_all[first]
    centers = (coords + 0.5) * voxel_size
    offsets = positions - centers[inv]
    v = len(uniq)
    pooled = np.zeros((v, features.shape[1] + 3))
    np.add.at(pooled, inv, np.hstack([features, offsets]))
    pooled /= counts[:, None]
    return VoxelGrid(voxel_size, coords, inv, counts, pooled, centers)


def lookup(grid_keys: np.ndarray, query_keys: np.ndarray) -> np.ndarray:
    """Row of each query key in a sorted key array, -1 where absent."""
    pos = np.searchsorted(grid_keys, query_keys)
    pos = np.minimum(pos, len(grid_keys) - 1)
    hit = grid_keys[pos] == query_keys if len(grid_keys) else np.zeros(len(query_keys), bool)
    return np.where(hit, pos, -1)


def correspond(view_a: View, mask_a: MaskSpec | None, view_b: View) -> np.ndarray:
    """(a-local visible index, b-local index) pairs sharing a parent point."""
    vis = np.arange(len(view_a)) if mask_a is None else mask_a.visible
    _, ia, ib = np.intersect1d(view_a.parent[vis], view_b.parent, assume_unique=True,
                               return_indices=True)
    return np.column_stack([vis[ia], ib]).astype(np.int64)
