"""Zipf prior and the Zipf-Sinkhorn regularization of teacher softmaps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TINY = 1e-30


@dataclass(frozen=True)
class ZipfPrior:
    alpha: float
    weights: np.ndarray


@dataclass
class TransportConfig:
    iters: int = 3
    alpha: float = 1.3
    alpha_final: float | None = None  # linear schedule target, None = constant
    tol: float = 1e-6

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("transport iters must be >= 1")
        if self.alpha < 0 or (self.alpha_final is not None and self.alpha_final < 0):
            raise ValueError("zipf exponent must be >= 0")


def zipf_prior(k: int, alpha: float) -> ZipfPrior:
    if k < 1 or alpha < 0:
        raise ValueError("need k >= 1 and alpha >= 0")
    w = np.arange(1, k + 1, dtype=np.float64) ** (-float(alpha))
    return ZipfPrior(float(alpha), w / w.sum())


def sinkhorn_plan(sim: np.ndarray, weights: np.ndarray, iters: int) -> np.ndarray:
    """Alternate row normalization (rows sum to 1) and column scaling to ``weights``.

    Returns the matrix right after the last column step.
    """
    f = np.array(sim, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != len(weights):
        raise ValueError(f"similarity shape {f.shape} does not match prior of length {len(weights)}")
    if not np.all(f > 0) or not np.all(np.isfinite(f)):
        raise ValueError("similarities must be finite and strictly positive")
    f /= max(f.sum(), TINY)
    for _ in range(iters):
        f /= np.maximum(f.sum(axis=1, keepdims=True), TINY)
        f *= weights / np.maximum(f.sum(axis=0), TINY)
    return f


def column_normalize(f: np.ndarray) -> np.ndarray:
    return f / np.maximum(f.sum(axis=0, keepdims=True), TINY)


def zipf_sinkhorn(sim: np.ndarray, prior: ZipfPrior, iters: int) -> np.ndarray:
    """Regularized teacher softmap: column-stochastic, N_v x K."""
    return column_normalize(sinkhorn_plan(sim, prior.weights, iters))


def uniform_sinkhorn(sim: np.ndarray, iters: int) -> np.ndarray:
    """Standard Sinkhorn with a uniform column marginal, written independently
    of :func:`sinkhorn_plan`; returns the column-normalized plan."""
    q = np.array(sim, dtype=np.float64).T  # K x N, SwAV layout
    k, n = q.shape
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
        q /= k
    return (q / q.sum(axis=1, keepdims=True)).T


def sinkhorn_diagnostics(plan: np.ndarray, weights: np.ndarray) -> dict[str, float]:
    rows = plan.sum(axis=1)
    mean = rows.mean()
    return {
        "col_deviation": float(np.max(np.abs(plan.sum(axis=0) - weights))),
        "row_spread": float(np.max(np.abs(rows - mean)) / mean) if mean > 0 else 0.0,
    }


def alpha_at(cfg: TransportConfig, progress: float) -> float:
    if cfg.alpha_final is None:
        return cfg.alpha
    progress = min(max(progress, 0.0), 1.0)
    return cfg.alpha + (cfg.alpha_final - cfg.alpha) * progress
