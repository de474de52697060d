"""Pretraining loop: two views per scene, block masks, teacher targets on
the full views, student forward on its input, loss, AdamW, prototype
renormalization and the EMA teacher update."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .cloudops import MaskSpec, View, block_mask, correspond, lookup, make_views, voxelize
from .config import RunConfig
from .encoder import build_graph, encode, encode_tensors, ema_update, init_params, input_features
from .objective import TeacherSide, renormalize_prototypes, view_pair_loss
from .transport import alpha_at

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PROTOS = "prototypes"
MASK_TOKEN = "mask_token"

# purpose codes for derived random streams
_VIEWS, _MASK, _JITTER, _PERTURB, _ORDER, _PROTO = 1, 2, 3, 4, 5, 6


class TrainError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    student: nx.ParamStore
    teacher: nx.ParamStore
    opt: nx.AdamW
    step: int = 0
    epoch: int = 0

    @property
    def prototypes(self) -> np.ndarray:
        return self.student.arrays[PROTOS]


def init_state(cfg: RunConfig) -> TrainState:
    seed = cfg.train.seed
    student = init_params(cfg.encoder, [seed, 0])
    rng = np.random.default_rng([seed, _PROTO])
    protos = rng.standard_normal((cfg.train.num_prototypes, cfg.encoder.embed))
    renormalize_prototypes(protos)
    student.add(PROTOS, protos)
    student.add(MASK_TOKEN, np.zeros(cfg.scene.feature_dim))
    opt = nx.AdamW(lr=cfg.train.lr, beta1=cfg.train.beta1, beta2=cfg.train.beta2,
                   eps=cfg.train.adam_eps, weight_decay=cfg.train.weight_decay,
                   no_decay=(PROTOS, MASK_TOKEN) + tuple(n for n in student.names() if n.endswith(".b")))
    return TrainState(student, student.copy(), opt)


def steps_per_epoch(cfg: RunConfig, num_scenes: int) -> int:
    return math.ceil(num_scenes / cfg.train.batch_size)


def schedule(step: int, total: int, cfg: RunConfig) -> dict[str, float]:
    """Cosine EMA momentum ramp from base to final; alpha per transport config."""
    t = cfg.train
    frac = 0.0 if total <= 0 else min(max(step / total, 0.0), 1.0)
    m = t.ema_final - (t.ema_final - t.ema_base) * (math.cos(math.pi * frac) + 1.0) / 2.0
    return {"ema_m": m, "alpha": alpha_at(cfg.transport, frac)}


# --------------------------------------------------------------------------
# per-scene preparation (everything except the student forward)


@dataclass
class StudentInput:
    x_const: np.ndarray
    token_frac: np.ndarray | None  # per-voxel fraction of mask-token members
    graph: object
    same: TeacherSide
    cross: TeacherSide | None
    achieved_ratio: float
    grid_keys: np.ndarray = field(default=None, repr=False)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


@dataclass
class Perturbation:
    """Student-side redraw of masked points, for leakage tests. Positions are
    redrawn uniformly over the scene, or moved by Gaussian noise of std
    ``position_noise`` when it is set."""

    seed: int
    position_noise: float | None = None


def perturb_masked(view: View, mask: MaskSpec, rng: np.random.Generator,
                   extent: float = 10.0, position_noise: float | None = None) -> View:
    """Copy of ``view`` with masked points' positions and features redrawn."""
    hidden = mask.masked(len(view))
    pos, feat = view.positions.copy(), view.features.copy()
    if position_noise is None:
        pos[hidden] = rng.uniform(0, extent, (len(hidden), 3))
    else:
        pos[hidden] += position_noise * rng.standard_normal((len(hidden), 3))
    feat[hidden] = 3.0 * rng.standard_normal((len(hidden), feat.shape[1]))
    return View(view.parent, pos, feat, view.original)


def _average_rows(rows: np.ndarray, cols: np.ndarray, n_cols: int):
    """Sparse averaging over (row, col) pairs; returns (unique rows, matrix)."""
    uniq, r = np.unique(rows, return_inverse=True)
    cnt = np.bincount(r).astype(np.float64)
    m = sp.csr_matrix((1.0 / cnt[r], (r, cols)), shape=(len(uniq), n_cols))
    return uniq, m


def masked_grid(view: View, mask: MaskSpec, voxel_size: float, jitter: float = 0.0,
                rng: np.random.Generator | None = None):
    """Voxelize a view with masked points kept in place (optionally jittered)
    and their features zeroed. Returns (grid, per-voxel masked fraction)."""
    n = len(view)
    hidden = mask.masked(n)
    pos = view.positions.copy()
    if jitter > 0:
        pos[hidden] += jitter * rng.standard_normal((len(hidden), 3))
    feat = view.features.copy()
    feat[hidden] = 0.0
    is_masked = np.zeros(n)
    is_masked[hidden] = 1.0
    grid = voxelize(pos, np.column_stack([feat, is_masked]), voxel_size)
    frac = grid.features[:, -4].copy()
    grid.features = np.delete(grid.features, -4, axis=1)
    return grid, frac


def masked_token_forward(state: TrainState, view: View, mask: MaskSpec, mode: str,
                         cfg: RunConfig, rng: np.random.Generator | None = None):
    """Student embeddings at fully masked voxels under a mask-token input.

    Masked points keep their coordinates ("naive") or get Gaussian jitter
    ("jitter"); their features are replaced by the learned mask token.
    Returns (embeddings, voxel coordinates) for the fully masked voxels."""
    if mode not in ("naive", "jitter"):
        raise ValueError(f"mode must be 'naive' or 'jitter', got {mode!r}")
    jitter = cfg.mask.jitter if mode == "jitter" else 0.0
    if jitter > 0 and rng is None:
        raise ValueError("jitter mode needs a random generator")
    grid, frac = masked_grid(view, mask, cfg.train.voxel_size, jitter, rng)
    inp = StudentInput(input_features(grid), frac, build_graph(grid, cfg.encoder), None, None,
                       mask.ratio, grid.keys)
    emb = student_embeddings(state.student.arrays, inp, cfg).value
    rows = np.flatnonzero(frac >= 1.0)
    return emb[rows], grid.coords[rows]


def prepare_view(cfg: RunConfig, view: View, mask: MaskSpec, other: View,
                 teacher_same: tuple, teacher_other: tuple,
                 student_view: View | None = None, jitter_rng=None) -> StudentInput | None:
    """Student input and aligned teacher targets for student view ``view``.

    ``teacher_*`` are (grid, embeddings) pairs for the full views. Returns
    None when nothing is supervised (masked modes with no fully masked voxel).
    """
    vs = cfg.train.voxel_size
    sview = student_view or view
    t_grid, t_emb = teacher_same
    o_grid, o_emb = teacher_other
    sup = cfg.train.supervision
    n = len(view)

    if sup == "observable":
        vis = mask.visible
        grid = voxelize(sview.positions[vis], sview.features[vis], vs)
        x = input_features(grid)
        frac = None
        rows = np.arange(len(grid))
        point_rows = np.full(n, -1)
        point_rows[vis] = grid.inverse
        src_points = vis
    else:
        jitter = cfg.mask.jitter if sup == "masked_jitter" else 0.0
        grid, frac = masked_grid(sview, mask, vs, jitter, jitter_rng)
        x = input_features(grid)
        rows = np.flatnonzero(frac >= 1.0)
        point_rows = grid.inverse
        src_points = mask.masked(n)

    t_rows = lookup(t_grid.keys, grid.keys[rows])
    ok = t_rows >= 0
    rows, t_rows = rows[ok], t_rows[ok]
    if len(rows) == 0:
        return None
    same = TeacherSide(t_emb[t_rows], rows)

    cross = None
    if cfg.objective.cross_view:
        pairs = correspond(view, None, other)
        sel = np.isin(pairs[:, 0], src_points, assume_unique=False)
        pairs = pairs[sel]
        s_rows = point_rows[pairs[:, 0]]
        keep = np.isin(s_rows, rows)
        if keep.any():
            uniq, avg = _average_rows(s_rows[keep], o_grid.inverse[pairs[keep, 1]], len(o_grid))
            cross = TeacherSide(np.asarray(avg @ o_emb), uniq)
        else:
            cross = TeacherSide(np.zeros((0, t_emb.shape[1])), np.zeros(0, dtype=np.int64))
    return StudentInput(x, frac, build_graph(grid, cfg.encoder), same, cross, mask.ratio, grid.keys)


def prepare_scene(cfg: RunConfig, teacher: nx.ParamStore, cloud, scene_id: int, step: int,
                  perturb: Perturbation | None = None) -> list[StudentInput | None]:
    seed = cfg.train.seed
    views = make_views(cloud, cfg.views, [seed, step, scene_id, _VIEWS])
    masks = [block_mask(v, cfg.mask.ratio, cfg.mask.block_size, [seed, step, scene_id, _MASK, a])
             for a, v in enumerate(views)]
    vs = cfg.train.voxel_size
    teach = []
    for v in views:
        g = voxelize(v.positions, v.features, vs)
        teach.append((g, encode(teacher, g, cfg.encoder)))
    out = []
    for a in (0, 1):
        sview = None
        if perturb is not None:
            sview = perturb_masked(views[a], masks[a], _rng(perturb.seed, step, scene_id, a),
                                   cfg.scene.extent, perturb.position_noise)
        out.append(prepare_view(cfg, views[a], masks[a], views[1 - a], teach[a], teach[1 - a],
                                sview, _rng(seed, step, scene_id, _JITTER, a)))
    return out


def student_embeddings(p: dict, inp: StudentInput, cfg: RunConfig) -> nx.Tensor:
    x = inp.x_const
    if inp.token_frac is not None:
        tok = nx.outer(inp.token_frac, p[MASK_TOKEN])
        x = nx.add(x, nx.concat([tok, np.zeros((len(inp.token_frac), 3))]))
    return encode_tensors(p, x, inp.graph, cfg.encoder)


def view_loss(p: dict, inp: StudentInput, cfg: RunConfig, teacher_protos: np.ndarray,
              alpha: float):
    emb = student_embeddings(p, inp, cfg)
    return view_pair_loss(cfg.objective, emb, p.get(PROTOS), inp.same, inp.cross,
                          teacher_protos, alpha, cfg.transport.iters)


def batch_loss(p: dict, prepared: list[list[StudentInput | None]], cfg: RunConfig,
               teacher_protos: np.ndarray, alpha: float):
    """Mean over scenes of L_1 + L_2. Returns (loss tensor, per-view records)."""
    total, records, n = None, [], 0
    for scene in prepared:
        views = [inp for inp in scene if inp is not None]
        if not views:
            continue
        scene_total = None
        for inp in views:
            la, diag = view_loss(p, inp, cfg, teacher_protos, alpha)
            records.append((float(la.value), diag, inp.achieved_ratio))
            scene_total = la if scene_total is None else nx.add(scene_total, la)
        total = scene_total if total is None else nx.add(total, scene_total)
        n += 1
    if total is None:
        return None, records
    return nx.scale(total, 1.0 / n), records


def train_step(state: TrainState, batch: list[tuple[int, object]], cfg: RunConfig,
               total_steps: int, perturb: Perturbation | None = None) -> dict:
    step = state.step
    sched = schedule(step, total_steps, cfg)
    try:
        prepared = [prepare_scene(cfg, state.teacher, cloud, sid, step, perturb)
                    for sid, cloud in batch]
    except Exception as e:  # noqa: BLE001 - rewrap with step context
        raise TrainError(f"step {step}: {e}") from e
    leaves = state.student.tensors(requires_grad=True)
    loss, records = batch_loss(leaves, prepared, cfg, state.teacher[PROTOS], sched["alpha"])
    if loss is None:
        raise TrainError(f"step {step}: empty supervision set in every scene")
    if not np.isfinite(loss.value):
        raise TrainError(f"step {step}: non-finite loss")
    loss.backward()
    state.student.zero_grad()
    state.student.collect(leaves)
    try:
        state.opt.step(state.student)
    except nx.NonFiniteError as e:
        raise TrainError(f"step {step}: {e}") from e
    renormalize_prototypes(state.student.arrays[PROTOS], _rng(cfg.train.seed, step, _PROTO))
    ema_update(state.teacher, state.student, sched["ema_m"])
    state.step += 1

    crosses = [d.cross for _, d, _ in records if d.cross is not None]
    return {
        "step": step,
        "epoch": state.epoch,
        "loss_total": float(loss.value),
        "loss_same": float(np.mean([d.same for _, d, _ in records])),
        "loss_cross": float(np.mean(crosses)) if crosses else None,
        "kl_diag": float(np.mean([d.kl for _, d, _ in records])),
        "proto_usage_entropy": float(np.mean([d.usage_entropy for _, d, _ in records])),
        "row_spread": float(np.mean([d.row_spread for _, d, _ in records])),
        "ema_m": sched["ema_m"],
        "alpha": sched["alpha"],
        "achieved_mask_ratio": float(np.mean([r for _, _, r in records])),
        "cross_skipped": int(sum(d.cross_skipped for _, d, _ in records)),
    }


def step_loss_fn(state: TrainState, batch: list[tuple[int, object]], cfg: RunConfig,
                 total_steps: int, perturb: Perturbation | None = None):
    """Loss of the next training step as a function of the student leaves,
    with views, masks and teacher targets frozen. For gradient checking."""
    step = state.step
    sched = schedule(step, total_steps, cfg)
    prepared = [prepare_scene(cfg, state.teacher, cloud, sid, step, perturb)
                for sid, cloud in batch]
    protos = state.teacher[PROTOS].copy()

    def loss_fn(leaves):
        loss, _ = batch_loss(leaves, prepared, cfg, protos, sched["alpha"])
        if loss is None:
            raise TrainError(f"step {step}: empty supervision set in every scene")
        return loss

    return loss_fn


def epoch_order(cfg: RunConfig, epoch: int, num_scenes: int) -> np.ndarray:
    return _rng(cfg.train.seed, epoch, _ORDER).permutation(num_scenes)


def pretrain(cfg: RunConfig, dataset, state: TrainState | None = None, *,
             metrics_path=None, checkpoint_path=None, max_steps: int | None = None,
             perturb: Perturbation | None = None, on_step=None):
    """Run (or resume) the epoch loop. Returns (state, list of step records)."""
    if not dataset:
        raise ValueError("empty dataset")
    state = state or init_state(cfg)
    per_epoch = steps_per_epoch(cfg, len(dataset))
    total = cfg.train.epochs * per_epoch
    records = []
    fh = open(metrics_path, "a") if metrics_path else None
    try:
        while state.step < total and (max_steps is None or len(records) < max_steps):
            epoch, k = divmod(state.step, per_epoch)
            state.epoch = epoch
            order = epoch_order(cfg, epoch, len(dataset))
            ids = order[k * cfg.train.batch_size:(k + 1) * cfg.train.batch_size]
            rec = train_step(state, [(int(i), dataset[i]) for i in ids], cfg, total, perturb)
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(state, rec)
            every = cfg.train.checkpoint_every
            if checkpoint_path and every and state.step % every == 0:
                save_checkpoint(state, cfg, checkpoint_path)
    finally:
        if fh:
            fh.close()
    state.epoch = state.step // per_epoch
    if checkpoint_path:
        save_checkpoint(state, cfg, checkpoint_path)
    return state, records


# --------------------------------------------------------------------------
# checkpoints


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def _unpack(obj: dict) -> np.ndarray:
    return np.array(obj["values"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(state: TrainState, cfg: RunConfig, path) -> None:
    arrays = {}
    for name, arr in state.student.arrays.items():
        arrays[f"student/{name}"] = _pack(arr)
        arrays[f"teacher/{name}"] = _pack(state.teacher.arrays[name])
        if name in state.opt.m:
            arrays[f"adam_m/{name}"] = _pack(state.opt.m[name])
            arrays[f"adam_v/{name}"] = _pack(state.opt.v[name])
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "counters": {"step": state.step, "epoch": state.epoch, "opt_step": state.opt.step_count},
        "arrays": arrays,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[TrainState, RunConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')!r} "
                              f"is not supported (expected {CHECKPOINT_VERSION})")
    try:
        cfg = RunConfig.from_dict(doc["config"])
        state = init_state(cfg)
        for name in state.student.names():
            state.student.arrays[name] = _unpack(doc["arrays"][f"student/{name}"])
            state.student.grads[name] = np.zeros_like(state.student.arrays[name])
            state.teacher.arrays[name] = _unpack(doc["arrays"][f"teacher/{name}"])
            if f"adam_m/{name}" in doc["arrays"]:
                state.opt.m[name] = _unpack(doc["arrays"][f"adam_m/{name}"])
                state.opt.v[name] = _unpack(doc["arrays"][f"adam_v/{name}"])
        c = doc["counters"]
        state.step, state.epoch, state.opt.step_count = c["step"], c["epoch"], c["opt_step"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    return state, cfg
