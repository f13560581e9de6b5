"""Panoptic fruit segmentation on voxelized clouds.

A sparse U-shaped network predicts per-voxel class logits and 3D offsets
toward the owning fruit center; points inherit their voxel's prediction.
Predicted fruit points are shifted by their offsets and clustered with a
flat-kernel mean shift; clusters become instances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import metrics
from .cloud import AugmentConfig, ColoredCloud, FruitInstance, SceneAnnotation, augment
from .errors import ConfigError, DivergenceError, EmptyInputError, ShapeError
from .nnkernels import ops
from .nnkernels.params import AdamState, BnParams, ParamStore, adam_step, bn_param, conv_param, linear_param
from .nnkernels.tape import Tape, Var
from .sparsegrid import halving_parents, kernel_map, voxelize
from .util import STREAM_AUGMENT, STREAM_DATA, STREAM_INIT, pack_coords, stream

N_CLASSES = 2  # background, fruit
FRUIT = 1


@dataclass
class SegNetConfig:
    voxel_size: float = 5e-4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    bandwidth: float = 0.01125
    min_points: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if len(self.channels) < 2 or any(c < 1 for c in self.channels):
            raise ConfigError("channels must list >= 2 positive widths")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.min_points < 1:
            raise ConfigError("min_points must be >= 1")


@dataclass
class SegModel:
    config: SegNetConfig
    store: ParamStore


@dataclass
class SegPrediction:
    """Per-point class probabilities and offset vectors."""

    class_probs: np.ndarray
    offsets: np.ndarray

    def fruit_mask(self) -> np.ndarray:
        # two classes: p(fruit) > 0.5 coincides with argmax
        return self.class_probs[:, FRUIT] > 0.5


@dataclass
class ShiftedPoints:
    """Predicted fruit points moved by their offsets, with back-pointers."""

    positions: np.ndarray
    source_indices: np.ndarray


@dataclass
class ClusterResult:
    labels: np.ndarray
    modes: np.ndarray
    bandwidth: float


def build_segnet(config: SegNetConfig) -> SegModel:
    store = ParamStore(config.rng_seed)
    rng = stream(config.rng_seed, STREAM_INIT)
    ch = config.channels
    conv_param(store, "stem.w", rng, 3, 3, ch[0])
    bn_param(store, "stem.bn", ch[0])
    for i in range(1, len(ch)):
        conv_param(store, f"down{i}.w", rng, 3, ch[i - 1], ch[i])
        bn_param(store, f"down{i}.bn", ch[i])
        conv_param(store, f"refine{i}.w", rng, 3, ch[i], ch[i])
        bn_param(store, f"refine{i}.bn", ch[i])
        conv_param(store, f"up{i}.w", rng, 3, ch[i - 1] + ch[i], ch[i - 1])
        bn_param(store, f"up{i}.bn", ch[i - 1])
    linear_param(store, "sem", rng, ch[0], N_CLASSES)
    linear_param(store, "off", rng, ch[0], 3)
    return SegModel(config, store)


def _bn(store: ParamStore, name: str) -> BnParams:
    return BnParams(
        store.params[f"{name}.gain"], store.params[f"{name}.bias"],
        store.buffers[f"{name}.running_mean"], store.buffers[f"{name}.running_var"],
    )


def _conv_block(tape, store, x, name, km, *, train, activate=True):
    y = ops.sparse_conv(tape, x, store.params[f"{name}.w"], km)
    bn = _bn(store, f"{name}.bn")
    y = ops.batch_norm(tape, y, bn.gain, bn.bias, bn.running_mean, bn.running_var, train=train)
    return ops.relu(tape, y) if activate else y


def _forward(cl: ColoredCloud, model: SegModel, tape: Tape | None, train: bool):
    """Network forward; returns per-point (logits Var, offsets Var, voxel map)."""
    cfg = model.config
    store = model.store
    tensor, vmap = voxelize(cl, cfg.voxel_size)
    if len(tensor) == 0:
        raise EmptyInputError("cloud has no points to voxelize")
    depth = len(cfg.channels)
    coords = [tensor.coords]
    strides = [1]
    same_maps = {0: kernel_map(coords[0], 1, kernel=3, stride=1)}
    x = _conv_block(tape, store, Var(tensor.features), "stem", same_maps[0], train=train)
    skips = [x]
    for i in range(1, depth):
        down = kernel_map(coords[i - 1], strides[i - 1], kernel=3, stride=2)
        coords.append(down.out_coords)
        strides.append(down.out_stride)
        x = _conv_block(tape, store, x, f"down{i}", down, train=train)
        same_maps[i] = kernel_map(coords[i], strides[i], kernel=3, stride=1)
        x = _conv_block(tape, store, x, f"refine{i}", same_maps[i], train=train)
        skips.append(x)
    for i in range(depth - 1, 0, -1):
        parents = halving_parents(coords[i - 1], strides[i - 1], coords[i])
        up = ops.gather_rows(tape, x, parents)
        x = ops.concat_cols(tape, [skips[i - 1], up])
        x = _conv_block(tape, store, x, f"up{i}", same_maps[i - 1], train=train)
    logits = ops.linear(tape, x, store.params["sem.w"], store.params["sem.b"])
    offsets = ops.linear(tape, x, store.params["off.w"], store.params["off.b"])
    point_logits = ops.gather_rows(tape, logits, vmap.point_to_voxel)
    point_offsets = ops.gather_rows(tape, offsets, vmap.point_to_voxel)
    return point_logits, point_offsets, vmap


def seg_forward(cl: ColoredCloud, model: SegModel) -> SegPrediction:
    """Inference: per-point class probabilities (rows sum to 1) and offsets."""
    logits, offsets, _ = _forward(cl, model, None, train=False)
    probs = ops.softmax(None, logits).value
    return SegPrediction(probs, offsets.value)


def oracle_prediction(cl: ColoredCloud, annotation: SceneAnnotation) -> SegPrediction:
    """Ground-truth semantics and exact center offsets (debug / upper bound)."""
    annotation.validate(len(cl))
    probs = np.zeros((len(cl), N_CLASSES))
    probs[np.arange(len(cl)), annotation.per_point_semantic] = 1.0
    offsets = np.zeros((len(cl), 3))
    for inst in annotation.instances:
        offsets[inst.point_indices] = inst.center - cl.points[inst.point_indices]
    return SegPrediction(probs, offsets)


def shift_points(cl: ColoredCloud, pred: SegPrediction) -> ShiftedPoints:
    """Move predicted fruit points by their offsets; keep back-pointers."""
    if pred.class_probs.shape[0] != len(cl):
        raise ShapeError("prediction does not cover the cloud")
    mask = pred.fruit_mask()
    idx = np.flatnonzero(mask)
    return ShiftedPoints(cl.points[idx] + pred.offsets[idx], idx)


# ---------------------------------------------------------------------------
# mean shift

_STOP_FACTOR = 1e-5
_MAX_ITER = 300


def mean_shift(points: np.ndarray, bandwidth: float) -> ClusterResult:
    """Flat-kernel mean shift.

    Seeds are the input points de-duplicated on a bandwidth/2 grid; modes
    closer than bandwidth/2 are merged weighted by basin size; every point
    is assigned to its nearest surviving mode.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyInputError("mean_shift needs at least one point")
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    half = bandwidth / 2.0

    cell = np.floor(pts / half).astype(np.int64)
    keys = pack_coords(cell)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    starts = np.flatnonzero(np.r_[True, sk[1:] != sk[:-1]])
    counts = np.diff(np.r_[starts, pts.shape[0]])
    seeds = np.add.reduceat(pts[order], starts, axis=0) / counts[:, None]

    tree = cKDTree(pts)
    modes = seeds.copy()
    active = np.arange(modes.shape[0])
    for _ in range(_MAX_ITER):
        if active.size == 0:
            break
        neighborhoods = tree.query_ball_point(modes[active], bandwidth, workers=1)
        new = np.array([pts[nbr].mean(axis=0) for nbr in neighborhoods])
        shift = np.linalg.norm(new - modes[active], axis=1)
        modes[active] = new
        active = active[shift >= _STOP_FACTOR * bandwidth]
    basins = tree.query_ball_point(modes, bandwidth, workers=1, return_length=True).astype(np.float64)

    # merge pass 1: greedy anchors in (basin desc, grid key asc) order;
    # a mode within bandwidth/2 of an accepted anchor folds into it
    rank = np.lexsort((sk[starts], -basins))
    anchor_pos: list[np.ndarray] = []
    sum_w: list[float] = []
    sum_wx: list[np.ndarray] = []
    for m in rank:
        pos, w = modes[m], basins[m]
        if anchor_pos:
            d = np.linalg.norm(np.asarray(anchor_pos) - pos, axis=1)
            j = int(np.argmin(d))
            if d[j] < half:
                sum_w[j] += w
                sum_wx[j] += w * pos
                continue
        anchor_pos.append(pos)
        sum_w.append(w)
        sum_wx.append(w * pos)
    merged = np.asarray([sx / w for sx, w in zip(sum_wx, sum_w)])
    weights = np.asarray(sum_w)

    # merge pass 2: weighted means may have drifted; enforce the invariant
    while merged.shape[0] > 1:
        diff = merged[:, None, :] - merged[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(dist, np.inf)
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        if dist[i, j] >= half:
            break
        i, j = min(i, j), max(i, j)
        w = weights[i] + weights[j]
        merged[i] = (weights[i] * merged[i] + weights[j] * merged[j]) / w
        weights[i] = w
        merged = np.delete(merged, j, axis=0)
        weights = np.delete(weights, j)

    _, labels = cKDTree(merged).query(pts, k=1, workers=1)
    return ClusterResult(labels.astype(np.int64), merged, bandwidth)


def assemble_instances(
    cl: ColoredCloud,
    shifted: ShiftedPoints,
    clusters: ClusterResult,
    *,
    min_points: int = 10,
) -> SceneAnnotation:
    """Clusters of original (unshifted) points become instances; clusters
    smaller than ``min_points`` fall back to background."""
    ids = np.full(len(cl), -1, dtype=np.int64)
    next_id = 0
    for c in np.unique(clusters.labels):
        members = shifted.source_indices[clusters.labels == c]
        if members.size >= min_points:
            ids[members] = next_id
            next_id += 1
    return SceneAnnotation.from_instance_ids(cl.points, ids)


def segment_cloud(
    cl: ColoredCloud,
    model: SegModel,
    *,
    bandwidth: float | None = None,
    min_points: int | None = None,
) -> SceneAnnotation:
    """Full pipeline: forward, shift, cluster, assemble."""
    pred = seg_forward(cl, model)
    return cluster_prediction(cl, pred, model.config, bandwidth=bandwidth, min_points=min_points)


def cluster_prediction(
    cl: ColoredCloud,
    pred: SegPrediction,
    config: SegNetConfig,
    *,
    bandwidth: float | None = None,
    min_points: int | None = None,
) -> SceneAnnotation:
    bandwidth = config.bandwidth if bandwidth is None else bandwidth
    min_points = config.min_points if min_points is None else min_points
    shifted = shift_points(cl, pred)
    if shifted.positions.shape[0] == 0:
        return SceneAnnotation.from_instance_ids(cl.points, np.full(len(cl), -1, dtype=np.int64))
    clusters = mean_shift(shifted.positions, bandwidth)
    return assemble_instances(cl, shifted, clusters, min_points=min_points)


# ---------------------------------------------------------------------------
# loss and training

LAM_CE = 2.0
LAM_LOV = 10.0
LAM_OFF = 10.0


def _loss_terms(tape, logits: Var, offsets: Var, cl: ColoredCloud, ann: SceneAnnotation,
                *, from_logits: bool):
    labels = ann.per_point_semantic.astype(np.int64)
    onehot = np.zeros((len(cl), N_CLASSES))
    onehot[np.arange(len(cl)), labels] = 1.0
    ce = ops.cross_entropy(tape, logits, onehot, from_logits=from_logits, reduction="mean")
    probs = ops.softmax(tape, logits) if from_logits else logits
    lov = ops.lovasz_softmax(tape, probs, labels)
    fruit_idx = np.flatnonzero(labels == FRUIT)
    if fruit_idx.size:
        target_rows = np.empty((len(cl), 3))
        for inst in ann.instances:
            target_rows[inst.point_indices] = inst.center - cl.points[inst.point_indices]
        diff = ops.shift_const(tape, ops.gather_rows(tape, offsets, fruit_idx),
                               -target_rows[fruit_idx])
        off = ops.scale(tape, ops.sum_all(tape, ops.abs_(tape, diff)), 1.0 / fruit_idx.size)
    else:
        off = Var(0.0)
    return ce, lov, off


def _weighted_total(tape, ce, lov, off, lam_ce, lam_lov, lam_off):
    total = ops.add(tape, ops.scale(tape, ce, lam_ce), ops.scale(tape, lov, lam_lov))
    return ops.add(tape, total, ops.scale(tape, off, lam_off))


def loss_ins(
    pred: SegPrediction,
    cl: ColoredCloud,
    ann: SceneAnnotation,
    *,
    lam_ce: float = LAM_CE,
    lam_lov: float = LAM_LOV,
    lam_off: float = LAM_OFF,
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Instance-segmentation loss on probabilities; returns value and gradients
    with respect to (class_probs, offsets)."""
    ann.validate(len(cl))
    tape = Tape()
    probs = Var(pred.class_probs)
    offsets = Var(pred.offsets)
    ce, lov, off = _loss_terms(tape, probs, offsets, cl, ann, from_logits=False)
    total = _weighted_total(tape, ce, lov, off, lam_ce, lam_lov, lam_off)
    tape.backward(total)
    gp = np.zeros_like(probs.value) if probs.grad is None else probs.grad
    go = np.zeros_like(offsets.value) if offsets.grad is None else offsets.grad
    return float(total.value), (gp, go)


def train_segmentation(
    model: SegModel,
    dataset: list[tuple[ColoredCloud, SceneAnnotation]],
    *,
    epochs: int,
    lr: float = 1e-2,
    lr_decay: float = 0.97,
    lam_ce: float = LAM_CE,
    lam_lov: float = LAM_LOV,
    lam_off: float = LAM_OFF,
    validation: list[tuple[ColoredCloud, SceneAnnotation]] | None = None,
    augment_config: AugmentConfig | None = None,
    seed: int = 0,
    eval_interval: int = 10,
    iou_threshold: float = 0.5,
) -> list[dict]:
    """Adam training with per-epoch lr decay; keeps the best-validation-PQ
    weights when a validation set is given.  Returns per-epoch records."""
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    data_rng = stream(seed, STREAM_DATA)
    aug_rng = stream(seed, STREAM_AUGMENT)
    state = AdamState()
    history: list[dict] = []
    best_pq, best_snap = -1.0, None
    for epoch in range(epochs):
        lr_epoch = lr * lr_decay ** epoch
        epoch_losses = []
        for i in data_rng.permutation(len(dataset)):
            cl, ann = dataset[i]
            if augment_config is not None:
                cl, ann = augment(cl, ann, augment_config, rng=aug_rng)
            model.store.zero_grads()
            tape = Tape()
            logits, offsets, _ = _forward(cl, model, tape, train=True)
            ce, lov, off = _loss_terms(tape, logits, offsets, cl, ann, from_logits=True)
            total = _weighted_total(tape, ce, lov, off, lam_ce, lam_lov, lam_off)
            if not math.isfinite(float(total.value)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} sample {int(i)}: "
                    f"ce={float(ce.value):.4g} lovasz={float(lov.value):.4g} offset={float(off.value):.4g}"
                )
            tape.backward(total)
            adam_step(model.store, state, lr_epoch)
            epoch_losses.append(float(total.value))
        record = {"epoch": epoch, "lr": lr_epoch, "loss": float(np.mean(epoch_losses))}
        if validation and (epoch % eval_interval == eval_interval - 1 or epoch == epochs - 1):
            pq = validation_pq(model, validation, iou_threshold=iou_threshold)
            record["val_pq"] = pq
            if pq > best_pq:
                best_pq, best_snap = pq, model.store.snapshot()
        history.append(record)
    if best_snap is not None:
        model.store.restore(best_snap)
    return history


def validation_pq(model: SegModel, scenes, *, iou_threshold: float = 0.5,
                  bandwidth: float | None = None) -> float:
    values = []
    for cl, ann in scenes:
        pred_ann = segment_cloud(cl, model, bandwidth=bandwidth)
        report = metrics.panoptic_quality(pred_ann, ann, iou_threshold=iou_threshold)
        values.append(report.average.pq)
    return float(np.mean(values))


def tune_bandwidth(
    model: SegModel,
    scenes: list[tuple[ColoredCloud, SceneAnnotation]],
    candidates: list[float],
) -> tuple[float, list[dict]]:
    """Pick the bandwidth with the best mean PQ on held-out scenes (ties go
    to the smaller value).  The network runs once per scene."""
    if not candidates:
        raise ConfigError("no bandwidth candidates given")
    preds = [(cl, ann, seg_forward(cl, model)) for cl, ann in scenes]
    table = []
    best_bw, best_pq = None, -1.0
    for bw in sorted(candidates):
        values = []
        for cl, ann, pred in preds:
            pred_ann = cluster_prediction(cl, pred, model.config, bandwidth=bw)
            values.append(metrics.panoptic_quality(pred_ann, ann).average.pq)
        pq = float(np.mean(values))
        table.append({"bandwidth": bw, "pq": pq})
        if pq > best_pq:
            best_bw, best_pq = bw, pq
    return float(best_bw), table
