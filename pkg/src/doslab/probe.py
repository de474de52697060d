"""Linear probing on frozen voxel embeddings."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .cloudops import voxelize
from .encoder import EncoderConfig, encode
from .scenegen import LabeledCloud, head_common_tail

log = logging.getLogger(__name__)


@dataclass
class LinearProbe:
    weights: np.ndarray  # (D', C) on whitened features
    bias: np.ndarray
    mean: np.ndarray
    transform: np.ndarray  # (D, D') whitening map
    losses: list[float] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.bias)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) @ self.transform) @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


@dataclass
class ProbeResult:
    per_class_iou: np.ndarray  # nan where the class has no ground-truth support
    miou: float
    macc: float
    acc: float
    head_common_tail: tuple[float, float, float]
    confusion: np.ndarray
    absent: list[int]

    def to_dict(self) -> dict:
        return {
            "mIoU": self.miou,
            "mAcc": self.macc,
            "acc": self.acc,
            "per_class": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "head_common_tail": list(self.head_common_tail),
            "absent_classes": self.absent,
        }


def extract_features(params: nx.ParamStore, scene: LabeledCloud, enc: EncoderConfig,
                     voxel_size: float) -> np.ndarray:
    """Per-point features: each point takes its voxel's embedding."""
    grid = voxelize(scene.positions, scene.features, voxel_size)
    return encode(params, grid, enc)[grid.inverse]


def voxel_groups(params, scene, enc, voxel_size, num_classes):
    """(features, labels, weights) with one row per (voxel, label) pair.

    Equivalent to per-point rows since points in a voxel share features."""
    grid = voxelize(scene.positions, scene.features, voxel_size)
    emb = encode(params, grid, enc)
    key = grid.inverse * num_classes + scene.labels
    uniq, counts = np.unique(key, return_counts=True)
    return emb[uniq // num_classes], uniq % num_classes, counts.astype(np.float64)


def fit_linear_probe(x: np.ndarray, y: np.ndarray, num_classes: int, iters: int = 300,
                     lr: float = 0.5, weights: np.ndarray | None = None,
                     record_loss: bool = False) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent from zero.

    Inputs are whitened first (a fixed linear map, so the head stays linear);
    directions with variance below 1e-10 of the largest are dropped."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mean = w @ x
    xc = x - mean
    evals, evecs = np.linalg.eigh((xc * w[:, None]).T @ xc)
    keep = evals > max(evals.max() * 1e-10, 1e-300)
    transform = evecs[:, keep] / np.sqrt(evals[keep])
    z = xc @ transform
    present = np.bincount(y, weights=w, minlength=num_classes) > 0
    if not present.all():
        log.warning("probe: classes %s absent from training labels", np.flatnonzero(~present).tolist())
    onehot = np.zeros((len(y), num_classes))
    onehot[np.arange(len(y)), y] = 1.0
    W = np.zeros((z.shape[1], num_classes))
    b = np.zeros(num_classes)
    mask = np.where(present, 0.0, -np.inf)
    losses = []
    for _ in range(iters):
        logits = z @ W + b + mask
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        if record_loss:
            lp = np.log(np.where(onehot > 0, p, 1.0))
            losses.append(float(-np.sum(w[:, None] * onehot * lp)))
        g = w[:, None] * (p - onehot)
        W -= lr * (z.T @ g)
        b -= lr * g.sum(axis=0)
    b = np.where(present, b, -1e30)
    return LinearProbe(W, b, mean, transform, losses)


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int,
                     weights: np.ndarray | None = None) -> np.ndarray:
    idx = np.asarray(y_true) * num_classes + np.asarray(y_pred)
    cm = np.bincount(idx, weights=weights, minlength=num_classes * num_classes)
    return cm.reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray, split_counts: np.ndarray | None = None) -> ProbeResult:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    pred = cm.sum(axis=0)
    has = support > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(has, tp / (support + pred - tp), np.nan)
        recall = np.where(has, tp / support, np.nan)
    total = cm.sum()
    thirds = head_common_tail(support if split_counts is None else split_counts)
    hct = tuple(float(np.nanmean(iou[g])) if np.any(has[g]) else float("nan") for g in thirds)
    return ProbeResult(iou, float(np.nanmean(iou)), float(np.nanmean(recall)),
                       float(tp.sum() / total) if total else 0.0, hct, cm,
                       np.flatnonzero(~has).tolist())


def evaluate(probe: LinearProbe, features: np.ndarray, labels: np.ndarray,
             weights: np.ndarray | None = None, split_counts: np.ndarray | None = None) -> ProbeResult:
    cm = confusion_matrix(labels, probe.predict(features), probe.num_classes, weights)
    return metrics_from_confusion(cm, split_counts)


def split_scenes(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([seed, 17]).permutation(n)
    k = min(max(1, int(round(train_fraction * n))), n - 1)
    return np.sort(order[:k]), np.sort(order[k:])


def linear_probe(params: nx.ParamStore, dataset: list[LabeledCloud], enc: EncoderConfig,
                 voxel_size: float, num_classes: int, iters: int = 300, lr: float = 0.5,
                 train_fraction: float = 0.8, seed: int = 0) -> ProbeResult:
    """Fit on a scene-level train split, evaluate on the rest. Head/common/tail
    thirds are ranked by training-split class frequency."""
    train, test = split_scenes(len(dataset), train_fraction, seed)

    def gather(ids):
        parts = [voxel_groups(params, dataset[i], enc, voxel_size, num_classes) for i in ids]
        return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                np.concatenate([p[2] for p in parts]))

    xt, yt, wt = gather(train)
    probe = fit_linear_probe(xt, yt, num_classes, iters, lr, wt)
    xe, ye, we = gather(test)
    counts = np.bincount(yt, weights=wt, minlength=num_classes)
    return evaluate(probe, xe, ye, we, counts)
