"""Fruit descriptor encoder.

Each fruit's local neighborhood (a re-centered spherical support) is
voxelized and pushed through a sparse residual conv stack; global average
pooling over the surviving voxels yields a fixed-size descriptor.  All
fruits of a scene pair are encoded in one batched forward so batch norm
sees the pair's fruit population as its batch.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .cloud import ColoredCloud, FruitInstance
from .errors import ConfigError, ValidationError
from .nnkernels import ops
from .nnkernels.params import BnParams, ParamStore, bn_param, conv_param
from .nnkernels.tape import Tape, Var
from .sparsegrid import kernel_map, support, voxelize
from .util import STREAM_DATA, STREAM_INIT, canonical_json, config_hash, stream

log = logging.getLogger("fruitmon.encoder")


@dataclass
class EncoderConfig:
    support_radius: float = 0.2
    voxel_size: float = 5e-4
    channels: tuple[int, ...] = (8, 8, 16, 16, 64)
    max_support_points: int = 60000
    rng_seed: int = 0

    def __post_init__(self):
        if self.support_radius <= 0 or self.voxel_size <= 0:
            raise ConfigError("support_radius and voxel_size must be positive")
        if len(self.channels) < 2 or any(c < 1 for c in self.channels):
            raise ConfigError("channels must list >= 2 positive widths")
        if self.max_support_points < 1:
            raise ConfigError("max_support_points must be >= 1")

    @property
    def descriptor_dim(self) -> int:
        return int(self.channels[-1])


@dataclass
class EncoderModel:
    config: EncoderConfig
    store: ParamStore


def build_encoder(config: EncoderConfig) -> EncoderModel:
    store = ParamStore(config.rng_seed)
    rng = stream(config.rng_seed, STREAM_INIT)
    ch = config.channels
    conv_param(store, "stem1.w", rng, 3, 3, ch[0])
    bn_param(store, "stem1.bn", ch[0])
    conv_param(store, "stem2.w", rng, 3, ch[0], ch[0])
    bn_param(store, "stem2.bn", ch[0])
    for b in range(1, len(ch)):
        pfx = f"block{b}"
        conv_param(store, f"{pfx}.down.w", rng, 3, ch[b - 1], ch[b])
        bn_param(store, f"{pfx}.down.bn", ch[b])
        for stage in ("a", "b"):
            conv_param(store, f"{pfx}.{stage}1.w", rng, 3, ch[b], ch[b])
            bn_param(store, f"{pfx}.{stage}1.bn", ch[b])
            conv_param(store, f"{pfx}.{stage}2.w", rng, 3, ch[b], ch[b])
            bn_param(store, f"{pfx}.{stage}2.bn", ch[b])
        conv_param(store, f"{pfx}.short.w", rng, 1, ch[b], ch[b])
        bn_param(store, f"{pfx}.short.bn", ch[b])
    return EncoderModel(config, store)


def _bn(store: ParamStore, name: str) -> BnParams:
    return BnParams(
        store.params[f"{name}.gain"], store.params[f"{name}.bias"],
        store.buffers[f"{name}.running_mean"], store.buffers[f"{name}.running_var"],
    )


def _conv_bn(tape, store, x, name, km, *, train, activate):
    y = ops.sparse_conv(tape, x, store.params[f"{name}.w"], km)
    bn = _bn(store, f"{name}.bn")
    y = ops.batch_norm(tape, y, bn.gain, bn.bias, bn.running_mean, bn.running_var, train=train)
    return ops.relu(tape, y) if activate else y


def _res_stage(tape, store, x, pfx, same, one, *, train, projected):
    y = _conv_bn(tape, store, x, f"{pfx}1", same, train=train, activate=True)
    y = _conv_bn(tape, store, y, f"{pfx}2", same, train=train, activate=False)
    if projected:
        base = pfx.rsplit(".", 1)[0]
        shortcut = _conv_bn(tape, store, x, f"{base}.short", one, train=train, activate=False)
    else:
        shortcut = x
    return ops.relu(tape, ops.add(tape, y, shortcut))


def _encode_supports_var(
    tape: Tape | None,
    supports: list[ColoredCloud | None],
    model: EncoderModel,
    *,
    train: bool,
) -> list[Var | None]:
    """One batched forward over all non-empty supports; returns one
    descriptor Var per support (None where the support is empty)."""
    cfg = model.config
    store = model.store
    coords_parts, feat_parts, kept = [], [], []
    for si, sup in enumerate(supports):
        if sup is None or len(sup) == 0:
            continue
        tensor, _ = voxelize(sup, cfg.voxel_size)
        coords_parts.append(tensor.coords)
        feat_parts.append(tensor.features)
        kept.append(si)
    out: list[Var | None] = [None] * len(supports)
    if not kept:
        return out
    coords = np.concatenate(coords_parts, axis=0)
    feats = np.concatenate(feat_parts, axis=0)
    batch = np.repeat(np.arange(len(kept), dtype=np.int64),
                      [c.shape[0] for c in coords_parts])

    x = Var(feats)
    stride = 1
    km0 = kernel_map(coords, stride, kernel=3, stride=1, batch=batch)
    x = _conv_bn(tape, store, x, "stem1", km0, train=train, activate=True)
    x = _conv_bn(tape, store, x, "stem2", km0, train=train, activate=True)
    for b in range(1, len(cfg.channels)):
        pfx = f"block{b}"
        down = kernel_map(coords, stride, kernel=3, stride=2, batch=batch)
        x = _conv_bn(tape, store, x, f"{pfx}.down", down, train=train, activate=True)
        coords, stride, batch = down.out_coords, down.out_stride, down.out_batch
        same = kernel_map(coords, stride, kernel=3, stride=1, batch=batch)
        one = kernel_map(coords, stride, kernel=1, stride=1, batch=batch)
        x = _res_stage(tape, store, x, f"{pfx}.a", same, one, train=train, projected=True)
        x = _res_stage(tape, store, x, f"{pfx}.b", same, one, train=train, projected=False)

    # rows are ordered by (batch, voxel key): pool each contiguous run
    starts = np.flatnonzero(np.r_[True, batch[1:] != batch[:-1]])
    counts = np.diff(np.r_[starts, batch.shape[0]])
    pooled = ops.segment_mean(tape, x, starts, counts)
    for row, si in enumerate(kept):
        out[si] = ops.gather_rows(tape, pooled, np.array([row]))
    return out


def extract_support(
    cloud: ColoredCloud,
    center: np.ndarray,
    config: EncoderConfig,
    *,
    rng: np.random.Generator | None = None,
) -> ColoredCloud:
    """Spherical support around a fruit center, subsampled if oversized."""
    sup = support(cloud, center, config.support_radius)
    if len(sup) > config.max_support_points:
        if rng is None:
            rng = stream(config.rng_seed, STREAM_DATA)
        sel = np.sort(rng.choice(len(sup), config.max_support_points, replace=False))
        sup = ColoredCloud(sup.points[sel], sup.colors[sel])
    return sup


def encode(cloud: ColoredCloud, center: np.ndarray, model: EncoderModel,
           *, rng: np.random.Generator | None = None) -> np.ndarray:
    """Descriptor for a single fruit (eval mode)."""
    sup = extract_support(cloud, center, model.config, rng=rng)
    vars_ = _encode_supports_var(None, [sup], model, train=False)
    if vars_[0] is None:
        return np.zeros(model.config.descriptor_dim)
    return vars_[0].value.reshape(-1)


@dataclass
class DescriptorSet:
    vectors: np.ndarray  # (count, descriptor_dim)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValidationError("descriptor vectors must be 2D")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def encode_all(
    cloud: ColoredCloud,
    instances: list[FruitInstance],
    model: EncoderModel,
    *,
    rng: np.random.Generator | None = None,
) -> DescriptorSet:
    """Descriptors for every instance, batched through one forward.

    Instances whose support is empty get a zero descriptor and a warning.
    """
    if rng is None:
        rng = stream(model.config.rng_seed, STREAM_DATA)
    supports = [extract_support(cloud, inst.center, model.config, rng=rng)
                for inst in instances]
    vars_ = _encode_supports_var(None, supports, model, train=False)
    z = model.config.descriptor_dim
    rows = np.zeros((len(instances), z))
    for i, v in enumerate(vars_):
        if v is None:
            log.warning("instance %d has an empty support; using a zero descriptor", i)
        else:
            rows[i] = v.value.reshape(-1)
    return DescriptorSet(rows)


# ---------------------------------------------------------------------------
# descriptor persistence


def save_descriptors(path, dset: DescriptorSet, *, config: EncoderConfig) -> None:
    """CSV of descriptors plus a JSON sidecar tying them to the encoder
    configuration (full float64 round-trip via repr formatting)."""
    z = dset.vectors.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id"] + [f"d{k}" for k in range(z)])
        for i, row in enumerate(dset.vectors):
            writer.writerow([i] + [f"{v:.17g}" for v in row])
    cfg = asdict(config)
    cfg["channels"] = list(config.channels)
    meta = {
        "schema_version": 1,
        "kind": "descriptors",
        "descriptor_dim": z,
        "count": len(dset),
        "encoder_config": cfg,
        "encoder_config_hash": config_hash(cfg),
    }
    with open(f"{path}.meta.json", "w") as fh:
        fh.write(canonical_json(meta))
        fh.write("\n")


def load_descriptors(path) -> tuple[DescriptorSet, dict | None]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "instance_id":
            raise ValidationError(f"{path}: not a descriptor table")
        rows = []
        for rec in reader:
            rows.append([float(v) for v in rec[1:]])
    vectors = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    meta = None
    try:
        with open(f"{path}.meta.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    return DescriptorSet(vectors), meta
