"""Two-stage voxel encoder: residual neighborhood-mean blocks on the fine
grid, one block on a coarser grid, coarse features broadcast back and
concatenated before the output affine."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .cloudops import VoxelGrid, _keys, lookup


@dataclass
class EncoderConfig:
    in_dim: int = 9  # feature_dim + 3 offset channels
    hidden: int = 64
    embed: int = 32
    radius: int = 1
    pool_factor: int = 2
    layers: int = 2

    def __post_init__(self):
        if self.hidden < 4 or self.embed < 4:
            raise ValueError("hidden and embed widths must be >= 4")
        if self.layers < 1:
            raise ValueError("need at least one fine layer")
        if self.pool_factor < 2:
            raise ValueError("pool_factor must be >= 2")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")


@dataclass
class GridGraph:
    """Constant sparse operators for one voxel grid."""

    fine_adj: sp.csr_matrix  # V x V, row-normalized neighborhood mean
    pool: sp.csr_matrix  # Vc x V mean
    coarse_adj: sp.csr_matrix  # Vc x Vc
    unpool: sp.csr_matrix  # V x Vc indicator


def neighborhood_mean(coords: np.ndarray, radius: int) -> sp.csr_matrix:
    keys = _keys(coords)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    v = len(coords)
    rows, cols = [], []
    for off in product(range(-radius, radius + 1), repeat=3):
        hit = lookup(sorted_keys, _keys(coords + np.array(off)))
        ok = hit >= 0
        rows.append(np.flatnonzero(ok))
        cols.append(order[hit[ok]])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    deg = np.bincount(rows, minlength=v).astype(np.float64)
    return sp.csr_matrix((1.0 / deg[rows], (rows, cols)), shape=(v, v))


def build_graph(grid: VoxelGrid, cfg: EncoderConfig) -> GridGraph:
    v = len(grid)
    coarse = np.floor_divide(grid.coords, cfg.pool_factor)
    ckeys, first, inv, counts = np.unique(_keys(coarse), return_index=True,
                                          return_inverse=True, return_counts=True)
    vc = len(ckeys)
    pool = sp.csr_matrix((1.0 / counts[inv], (inv, np.arange(v))), shape=(vc, v))
    unpool = sp.csr_matrix((np.ones(v), (np.arange(v), inv)), shape=(v, vc))
    return GridGraph(neighborhood_mean(grid.coords, cfg.radius), pool,
                     neighborhood_mean(coarse[first], cfg.radius), unpool)


def input_features(grid: VoxelGrid) -> np.ndarray:
    """Pooled features with offsets expressed in voxel units."""
    x = grid.features.copy()
    x[:, -3:] /= grid.voxel_size
    return x


def param_names(cfg: EncoderConfig) -> list[str]:
    names = ["enc.in.w", "enc.in.b"]
    for layer in range(cfg.layers):
        names += [f"enc.fine{layer}.w", f"enc.fine{layer}.b"]
    return names + ["enc.coarse.w", "enc.coarse.b", "enc.out.w", "enc.out.b"]


def init_params(cfg: EncoderConfig, seed, store: nx.ParamStore | None = None) -> nx.ParamStore:
    rng = np.random.default_rng(seed)
    store = store if store is not None else nx.ParamStore()
    h = cfg.hidden

    def lin(name, fan_in, fan_out):
        store.add(f"{name}.w", rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        store.add(f"{name}.b", np.zeros(fan_out))

    lin("enc.in", cfg.in_dim, h)
    for layer in range(cfg.layers):
        lin(f"enc.fine{layer}", h, h)
    lin("enc.coarse", h, h)
    lin("enc.out", 2 * h, cfg.embed)
    return store


def _block(h, adj, p, name):
    return nx.add(h, nx.spmm(adj, nx.relu(nx.affine(h, p[f"{name}.w"], p[f"{name}.b"]))))


def encode_tensors(p: dict, x, graph: GridGraph, cfg: EncoderConfig) -> nx.Tensor:
    """Per-voxel embeddings; ``p`` maps parameter names to tensors or arrays."""
    h = nx.affine(x, p["enc.in.w"], p["enc.in.b"])
    for layer in range(cfg.layers):
        h = _block(h, graph.fine_adj, p, f"enc.fine{layer}")
    hc = _block(nx.spmm(graph.pool, h), graph.coarse_adj, p, "enc.coarse")
    up = nx.spmm(graph.unpool, hc)
    return nx.affine(nx.concat([h, up]), p["enc.out.w"], p["enc.out.b"])


def encode(params: nx.ParamStore, grid: VoxelGrid, cfg: EncoderConfig) -> np.ndarray:
    """Gradient-free forward on a grid."""
    if len(grid) == 0:
        raise ValueError("empty voxel grid")
    return encode_tensors(params.arrays, input_features(grid), build_graph(grid, cfg), cfg).value


def ema_update(teacher: nx.ParamStore, student: nx.ParamStore, m: float) -> nx.ParamStore:
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA momentum must be in [0, 1]")
    nx.check_same_layout(teacher, student)
    for name, t in teacher.arrays.items():
        t *= m
        t += (1.0 - m) * student.arrays[name]
    return teacher
