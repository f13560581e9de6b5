"""Synthetic greenhouse rows with known instances and temporal ground truth.

A scene is a jittered canopy slab along the x (row) axis plus spherical
fruits hanging slightly in front of it.  Pairs of scans share fruit
identities: fruits grow, drift (bounded by ``max_move``), ripen, disappear
and appear; the generator emits the exact association.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .cloud import (
    ColoredCloud,
    FruitInstance,
    SceneAnnotation,
    TemporalAssociation,
    load_ply,
    save_ply,
)
from .errors import ConfigError

SCHEMA_VERSION = 1

# base hue ranges; per-fruit base colors are drawn once and jittered per point
_FRUIT_RED = (0.55, 0.95)
_FRUIT_GREEN = (0.08, 0.45)
_FRUIT_BLUE = (0.05, 0.25)
_CANOPY_RED = (0.05, 0.35)
_CANOPY_GREEN = (0.45, 0.85)
_CANOPY_BLUE = (0.05, 0.30)


@dataclass
class OrchardConfig:
    row_length: float = 1.0
    row_height: float = 0.3
    row_depth: float = 0.02  # canopy slab jitter (std, m)
    fruit_count: tuple[int, int] = (12, 18)
    fruit_radius: tuple[float, float] = (0.0080, 0.0108)  # centered near 0.0094
    points_per_fruit: tuple[int, int] = (600, 1000)
    canopy_density: float = 50_000.0  # points per m^2 of slab
    fruit_aspect: tuple[float, float] = (0.9, 1.1)
    color_noise: float = 0.03
    dropout: float = 0.0
    # temporal model
    growth_factor: tuple[float, float] = (1.0, 1.1)
    drift_sigma: float = 0.01
    max_move: float = 0.05
    disappear_prob: float = 0.1
    appear_prob: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("fruit_count", "fruit_radius", "points_per_fruit",
                     "fruit_aspect", "growth_factor"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is not a valid range: {(lo, hi)}")
        if self.fruit_count[0] < 0:
            raise ConfigError("fruit_count must be non-negative")
        if self.fruit_radius[0] <= 0:
            raise ConfigError("fruit_radius must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        for name in ("row_length", "row_height", "canopy_density"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("disappear_prob", "appear_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.drift_sigma < 0 or self.max_move <= 0:
            raise ConfigError("drift_sigma must be >= 0 and max_move > 0")


class ScenePair(NamedTuple):
    cloud_prev: ColoredCloud
    ann_prev: SceneAnnotation
    cloud_t: ColoredCloud
    ann_t: SceneAnnotation
    association: TemporalAssociation


@dataclass
class _Fruit:
    center: np.ndarray
    radius: float
    aspect: np.ndarray
    base_color: np.ndarray


def _place_centers(rng, cfg: OrchardConfig, radii, existing=None) -> list[np.ndarray]:
    """Rejection-sample fruit centers with pairwise spacing >= 2 * max radius."""
    centers: list[np.ndarray] = []
    anchors = [] if existing is None else [(np.asarray(c), r) for c, r in existing]
    margin = max(radii) if len(radii) else 0.0
    for r in radii:
        for _ in range(4000):
            cand = np.array([
                rng.uniform(margin, max(cfg.row_length - margin, margin)),
                rng.uniform(-0.040, -0.015),  # hangs in front of the slab
                rng.uniform(margin, max(cfg.row_height - margin, margin)),
            ])
            ok = True
            for other, r2 in list(zip(centers, radii)) + anchors:
                if np.linalg.norm(cand - other) < 2.0 * max(r, r2):
                    ok = False
                    break
            if ok:
                centers.append(cand)
                break
        else:
            raise ConfigError(
                f"cannot place {len(radii)} fruits with 2r spacing in a "
                f"{cfg.row_length} x {cfg.row_height} m row"
            )
    return centers


def _draw_fruits(rng, cfg: OrchardConfig, count: int) -> list[_Fruit]:
    radii = rng.uniform(*cfg.fruit_radius, size=count)
    centers = _place_centers(rng, cfg, radii)
    fruits = []
    for center, radius in zip(centers, radii):
        aspect = rng.uniform(*cfg.fruit_aspect, size=3)
        base = np.array([rng.uniform(*_FRUIT_RED), rng.uniform(*_FRUIT_GREEN),
                         rng.uniform(*_FRUIT_BLUE)])
        fruits.append(_Fruit(center, float(radius), aspect, base))
    return fruits


def _fruit_points(rng, fruit: _Fruit, count: int, noise: float):
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    pts = fruit.center + fruit.radius * fruit.aspect * direction
    cols = np.clip(fruit.base_color + rng.normal(0.0, noise, (count, 3)), 0.0, 1.0)
    return pts, cols


def _canopy(rng, cfg: OrchardConfig):
    n = int(round(cfg.canopy_density * cfg.row_length * cfg.row_height))
    pts = np.column_stack([
        rng.uniform(0.0, cfg.row_length, n),
        rng.normal(0.0, cfg.row_depth, n),
        rng.uniform(0.0, cfg.row_height, n),
    ])
    base = np.column_stack([
        rng.uniform(*_CANOPY_RED, n),
        rng.uniform(*_CANOPY_GREEN, n),
        rng.uniform(*_CANOPY_BLUE, n),
    ])
    cols = np.clip(base + rng.normal(0.0, cfg.color_noise, (n, 3)), 0.0, 1.0)
    return pts, cols


def _assemble(rng, cfg: OrchardConfig, fruits: list[_Fruit]):
    """Build cloud + annotation from fruit models; returns both plus kept-fruit flags."""
    canopy_pts, canopy_cols = _canopy(rng, cfg)
    parts_p, parts_c, spans = [canopy_pts], [canopy_cols], []
    cursor = canopy_pts.shape[0]
    for fruit in fruits:
        count = int(rng.integers(cfg.points_per_fruit[0], cfg.points_per_fruit[1] + 1))
        pts, cols = _fruit_points(rng, fruit, count, cfg.color_noise)
        parts_p.append(pts)
        parts_c.append(cols)
        spans.append((cursor, cursor + count))
        cursor += count
    points = np.concatenate(parts_p, axis=0)
    colors = np.concatenate(parts_c, axis=0)
    keep = np.ones(points.shape[0], dtype=bool)
    if cfg.dropout > 0:
        keep = rng.random(points.shape[0]) >= cfg.dropout
    new_index = np.cumsum(keep) - 1
    out = ColoredCloud(points[keep], colors[keep])
    instances, kept_flags = [], []
    for lo, hi in spans:
        members = np.arange(lo, hi)[keep[lo:hi]]
        kept_flags.append(members.size > 0)
        if members.size:
            instances.append(FruitInstance.from_points(out.points, new_index[members]))
    ids = np.full(len(out), -1, dtype=np.int64)
    for k, inst in enumerate(instances):
        ids[inst.point_indices] = k
    return out, SceneAnnotation.from_instance_ids(out.points, ids), kept_flags


def generate_scene(config: OrchardConfig) -> tuple[ColoredCloud, SceneAnnotation]:
    """One deterministic scene for ``config.rng_seed``."""
    rng = np.random.default_rng(config.rng_seed)
    count = int(rng.integers(config.fruit_count[0], config.fruit_count[1] + 1))
    fruits = _draw_fruits(rng, config, count)
    cloud, ann, _ = _assemble(rng, config, fruits)
    return cloud, ann


def _bounded_drift(rng, sigma: float, bound: float) -> np.ndarray:
    """Normal drift, resampled until its norm stays under ``bound``."""
    if sigma == 0:
        return np.zeros(3)
    for _ in range(1000):
        d = rng.normal(0.0, sigma, 3)
        if np.linalg.norm(d) < bound:
            return d
    return np.zeros(3)


def generate_pair(config: OrchardConfig) -> ScenePair:
    """Two scans of the same row plus the exact fruit association."""
    rng = np.random.default_rng(config.rng_seed)
    count = int(rng.integers(config.fruit_count[0], config.fruit_count[1] + 1))
    fruits_prev = _draw_fruits(rng, config, count)
    cloud_prev, ann_prev, kept_prev = _assemble(rng, config, fruits_prev)
    # map model index -> annotation instance index (dropout may delete fruits)
    prev_ann_index, k = {}, 0
    for model_idx, kept in enumerate(kept_prev):
        if kept:
            prev_ann_index[model_idx] = k
            k += 1

    fruits_t: list[_Fruit] = []
    origin: list[int | None] = []
    for model_idx, fruit in enumerate(fruits_prev):
        if rng.random() < config.disappear_prob:
            continue
        drift = _bounded_drift(rng, config.drift_sigma, config.max_move)
        growth = rng.uniform(*config.growth_factor)
        ripen = np.array([rng.uniform(0.0, 0.08), -rng.uniform(0.0, 0.08), 0.0])
        fruits_t.append(_Fruit(
            center=fruit.center + drift,
            radius=fruit.radius * growth,
            aspect=fruit.aspect,
            base_color=np.clip(fruit.base_color + ripen, 0.0, 1.0),
        ))
        origin.append(model_idx)
    n_appear = int(np.sum(rng.random(count) < config.appear_prob)) if count else 0
    if n_appear:
        radii = rng.uniform(*config.fruit_radius, size=n_appear)
        existing = [(f.center, f.radius) for f in fruits_t]
        for center, radius in zip(_place_centers(rng, config, radii, existing), radii):
            base = np.array([rng.uniform(*_FRUIT_RED), rng.uniform(*_FRUIT_GREEN),
                             rng.uniform(*_FRUIT_BLUE)])
            fruits_t.append(_Fruit(center, float(radius), rng.uniform(*config.fruit_aspect, 3), base))
            origin.append(None)

    order = rng.permutation(len(fruits_t))
    fruits_t = [fruits_t[i] for i in order]
    origin = [origin[i] for i in order]
    cloud_t, ann_t, kept_t = _assemble(rng, config, fruits_t)
    pairs: dict[int, int | None] = {}
    k = 0
    for model_idx, kept in enumerate(kept_t):
        if not kept:
            continue
        src = origin[model_idx]
        pairs[k] = None if src is None else prev_ann_index.get(src)
        k += 1
    return ScenePair(cloud_prev, ann_prev, cloud_t, ann_t, TemporalAssociation(pairs))


def corrupt_instances(
    cloud: ColoredCloud,
    annotation: SceneAnnotation,
    *,
    fraction: float = 0.2,
    split_prob: float = 0.5,
    rng: np.random.Generator,
) -> SceneAnnotation:
    """Emulate segmentation errors: bite off each instance's boundary points.

    A directional ``fraction`` of every instance is removed; the bite either
    falls back to background or becomes a spurious extra instance.
    """
    ids = annotation.instance_ids(len(cloud))
    next_id = len(annotation.instances)
    for k, inst in enumerate(annotation.instances):
        members = inst.point_indices
        n_bite = int(round(fraction * members.size))
        if n_bite == 0:
            continue
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        proj = (cloud.points[members] - inst.center) @ direction
        bite = members[np.argsort(-proj, kind="stable")[:n_bite]]
        if rng.random() < split_prob and n_bite >= 3:
            ids[bite] = next_id
            next_id += 1
        else:
            ids[bite] = -1
    return SceneAnnotation.from_instance_ids(cloud.points, ids)


# ---------------------------------------------------------------------------
# on-disk layout used by the CLI

def write_pair(directory: str | Path, pair: ScenePair, config: OrchardConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_ply(directory / "scene_t0.ply", pair.cloud_prev, pair.ann_prev)
    save_ply(directory / "scene_t1.ply", pair.cloud_t, pair.ann_t)
    pair.association.save_csv(directory / "assoc_t1_t0.csv")
    with open(directory / "config.json", "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "orchard": asdict(config)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pair(directory: str | Path) -> ScenePair:
    directory = Path(directory)
    cloud_prev, ann_prev = load_ply(directory / "scene_t0.ply")
    cloud_t, ann_t = load_ply(directory / "scene_t1.ply")
    if ann_prev is None or ann_t is None:
        raise ConfigError(f"{directory}: pair scenes must carry instance annotations")
    assoc = TemporalAssociation.load_csv(directory / "assoc_t1_t0.csv")
    return ScenePair(cloud_prev, ann_prev, cloud_t, ann_t, assoc)
