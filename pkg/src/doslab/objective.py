"""Prototype similarities, softmap / clustering normalizations and the losses
that compare student predictions with teacher targets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .transport import sinkhorn_plan, zipf_prior

log = logging.getLogger(__name__)

OBJECTIVES = ("softmap_zipf", "softmap_uniform", "clustering", "feature_regression")


@dataclass
class SimilarityMatrix:
    """``values = exp(logits)`` with ``logits = cos / tau``."""

    logits: np.ndarray
    tau: float

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.logits)

    def stabilized(self) -> np.ndarray:
        """Values rescaled by ``exp(-max logit)``; same normalizations, no overflow."""
        return np.exp(self.logits - self.logits.max())


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(n > 1e-12, x / np.where(n > 1e-12, n, 1.0), 0.0)


def cosine(emb: np.ndarray, protos: np.ndarray) -> np.ndarray:
    return _unit_rows(np.asarray(emb, float)) @ _unit_rows(np.asarray(protos, float)).T


def similarity(emb: np.ndarray, protos: np.ndarray, tau: float) -> SimilarityMatrix:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return SimilarityMatrix(cosine(emb, protos) / tau, tau)


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmap_normalize(s) -> np.ndarray:
    """Normalize across points: each column sums to one."""
    if isinstance(s, SimilarityMatrix):
        return _softmax(s.logits, axis=0)
    s = np.asarray(s, dtype=np.float64)
    return s / s.sum(axis=0, keepdims=True)


def cluster_normalize(s) -> np.ndarray:
    """Normalize across prototypes: each row sums to one."""
    if isinstance(s, SimilarityMatrix):
        return _softmax(s.logits, axis=1)
    s = np.asarray(s, dtype=np.float64)
    return s / s.sum(axis=1, keepdims=True)


def student_logits(emb: nx.Tensor, protos: nx.Tensor, tau: float) -> nx.Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return nx.scale(nx.matmul(nx.normalize_rows(emb), nx.transpose(nx.normalize_rows(protos))), 1.0 / tau)


def _entropy_cols(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=0)


def _as_log(pred):
    if isinstance(pred, nx.Tensor):
        return pred
    with np.errstate(divide="ignore"):
        return nx.Tensor(np.log(np.asarray(pred, dtype=np.float64)))


def softmap_loss(target: np.ndarray, pred) -> tuple[nx.Tensor, float]:
    """Cross-entropy between target and predicted softmaps, averaged over
    prototypes. ``pred`` is a tensor of log-probabilities or an array of
    probabilities. Also returns the KL diagnostic (loss minus mean target
    column entropy)."""
    pred = _as_log(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: target {target.shape} vs pred {pred.shape}")
    k = target.shape[1]
    loss = nx.weighted_sum(pred, -target / k)
    kl = float(loss.value) - float(_entropy_cols(target).mean())
    return loss, kl


def clustering_loss(target: np.ndarray, pred) -> nx.Tensor:
    """Mean over points of the row-wise cross-entropy."""
    pred = _as_log(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: target {target.shape} vs pred {pred.shape}")
    return nx.weighted_sum(pred, -target / target.shape[0])


@dataclass
class RegressionStats:
    zero_rows: int = 0


def feature_regression_loss(student: nx.Tensor, teacher: np.ndarray,
                            stats: RegressionStats | None = None) -> nx.Tensor:
    """Mean of ``1 - cos`` over aligned rows; zero rows count as cosine 0."""
    student = student if isinstance(student, nx.Tensor) else nx.Tensor(student)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch: {student.shape} vs {teacher.shape}")
    zero = int(np.sum(np.linalg.norm(student.value, axis=1) <= 1e-12)
               + np.sum(np.linalg.norm(teacher, axis=1) <= 1e-12))
    if zero:
        log.warning("feature regression: %d zero-norm rows", zero)
        if stats is not None:
            stats.zero_rows += zero
    n = teacher.shape[0]
    cos = nx.row_dot(nx.normalize_rows(student), _unit_rows(teacher))
    return nx.add(1.0, nx.scale(nx.total(cos), -1.0 / n))


# --------------------------------------------------------------------------
# view-pair composition


@dataclass
class ObjectiveConfig:
    mode: str = "softmap_zipf"
    tau_student: float = 0.1
    tau_teacher: float = 0.05
    cross_view: bool = True

    def __post_init__(self):
        if self.mode not in OBJECTIVES:
            raise ValueError(f"unknown objective mode {self.mode!r}")
        if not (self.tau_student > 0 and self.tau_teacher > 0):
            raise ValueError("temperatures must be positive")


@dataclass
class TeacherSide:
    """Teacher embeddings row-aligned with the supervised student rows.

    ``rows`` selects the student rows the term covers (``None`` = all)."""

    emb: np.ndarray
    rows: np.ndarray | None = None


@dataclass
class PairDiagnostics:
    same: float = 0.0
    cross: float | None = None
    kl: float = 0.0
    usage_entropy: float = 0.0
    row_spread: float = 0.0
    cross_skipped: bool = False
    extra: dict = field(default_factory=dict)


def term_loss(cfg: ObjectiveConfig, student_emb: nx.Tensor, protos: nx.Tensor | None,
              teacher_emb: np.ndarray, teacher_protos: np.ndarray | None,
              alpha: float, iters: int) -> tuple[nx.Tensor, dict]:
    """One distillation term (same-view or cross-view) over aligned rows."""
    if cfg.mode == "feature_regression":
        stats = RegressionStats()
        loss = feature_regression_loss(student_emb, teacher_emb, stats)
        return loss, {"kl": 0.0, "zero_rows": stats.zero_rows}
    sim_t = similarity(teacher_emb, teacher_protos, cfg.tau_teacher)
    logits = student_logits(student_emb, protos, cfg.tau_student)
    k = sim_t.logits.shape[1]
    if cfg.mode == "clustering":
        plan = sinkhorn_plan(sim_t.stabilized(), np.full(k, 1.0 / k), iters)
        target = plan / plan.sum(axis=1, keepdims=True)
        loss = clustering_loss(target, nx.log_softmax(logits, axis=1))
        usage = target.mean(axis=0)
        return loss, {"kl": 0.0, "usage": usage, "plan": plan, "weights": np.full(k, 1.0 / k)}
    a = alpha if cfg.mode == "softmap_zipf" else 0.0
    prior = zipf_prior(k, a)
    plan = sinkhorn_plan(sim_t.stabilized(), prior.weights, iters)
    target = plan / np.maximum(plan.sum(axis=0, keepdims=True), 1e-30)
    loss, kl = softmap_loss(target, nx.log_softmax(logits, axis=0))
    usage = cluster_normalize(sim_t).mean(axis=0)
    return loss, {"kl": kl, "usage": usage, "plan": plan, "weights": prior.weights}


def view_pair_loss(cfg: ObjectiveConfig, student_emb: nx.Tensor, protos: nx.Tensor | None,
                   same: TeacherSide, cross: TeacherSide | None,
                   teacher_protos: np.ndarray | None, alpha: float = 0.0,
                   iters: int = 3) -> tuple[nx.Tensor, PairDiagnostics]:
    """Half the sum of the same-view and cross-view terms for one student view.

    Falls back to the same-view term alone when cross-view supervision is off
    or the correspondence is empty; ``cross_skipped`` records that."""
    n = student_emb.shape[0] if same.rows is None else len(same.rows)
    if n == 0:
        raise ValueError("empty same-view supervision set")
    s_emb = student_emb if same.rows is None else nx.take_rows(student_emb, same.rows)
    l_same, d_same = term_loss(cfg, s_emb, protos, same.emb, teacher_protos, alpha, iters)
    diag = PairDiagnostics(same=float(l_same.value), kl=d_same["kl"])
    if "usage" in d_same:
        u = np.clip(d_same["usage"], 1e-300, None)
        diag.usage_entropy = float(-np.sum(u * np.log(u)))
        rows = d_same["plan"].sum(axis=1)
        diag.row_spread = float(np.max(np.abs(rows - rows.mean())) / rows.mean())
    if not cfg.cross_view or cross is None or cross.rows is None or len(cross.rows) == 0:
        diag.cross_skipped = cfg.cross_view
        return l_same, diag
    c_emb = nx.take_rows(student_emb, cross.rows)
    l_cross, d_cross = term_loss(cfg, c_emb, protos, cross.emb, teacher_protos, alpha, iters)
    diag.cross = float(l_cross.value)
    diag.kl = 0.5 * (d_same["kl"] + d_cross["kl"])
    return nx.scale(nx.add(l_same, l_cross), 0.5), diag


# --------------------------------------------------------------------------
# prototype bank


def renormalize_prototypes(protos: np.ndarray, rng: np.random.Generator | None = None) -> int:
    """Scale rows to unit norm in place; zero rows are redrawn. Returns the
    number of redrawn rows."""
    norms = np.linalg.norm(protos, axis=1)
    dead = np.flatnonzero(norms <= 1e-12)
    if dead.size:
        rng = rng or np.random.default_rng(0)
        protos[dead] = rng.standard_normal((dead.size, protos.shape[1]))
        norms[dead] = np.linalg.norm(protos[dead], axis=1)
        log.warning("reinitialized %d zero prototype rows: %s", dead.size, dead.tolist())
    protos /= norms[:, None]
    return int(dead.size)
