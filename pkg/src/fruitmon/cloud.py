"""Colored point clouds and their annotations.

Data model for RGB point clouds of fruit rows, per-scene instance
annotations, temporal associations between scans, PLY round-trip I/O,
row-axis cropping and training-time augmentation.

File conventions:
  * PLY, ascii or binary_little_endian; vertex properties x/y/z (float32),
    red/green/blue (uint8), optional instance_id (int32, -1 = background)
    and semantic (uint8, 1 = fruit).
  * associations: CSV with header ``t_id,prev_id`` where ``prev_id`` is -1
    for fruits with no predecessor.
"""
from __future__ import annotations

import colorsys
import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyInputError, PlyParseError, ValidationError

BACKGROUND_ID = -1
SEMANTIC_BACKGROUND = 0
SEMANTIC_FRUIT = 1


@dataclass
class ColoredCloud:
    """Points in meters with per-point RGB in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] != self.colors.shape[0]:
            raise ValidationError(
                f"points ({self.points.shape[0]}) and colors ({self.colors.shape[0]}) disagree"
            )
        if self.points.size and not np.isfinite(self.points).all():
            bad = int(np.flatnonzero(~np.isfinite(self.points).all(axis=1))[0])
            raise ValidationError(f"non-finite coordinate at vertex {bad}")
        if self.colors.size and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValidationError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class FruitInstance:
    """One fruit: member point indices plus derived center and radius."""

    point_indices: np.ndarray
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64).ravel()
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.point_indices.size == 0:
            raise ValidationError("instance must own at least one point")

    @classmethod
    def from_points(cls, points: np.ndarray, indices: np.ndarray) -> "FruitInstance":
        """Build an instance with center = mean of members, radius = max member distance."""
        idx = np.sort(np.asarray(indices, dtype=np.int64).ravel())
        if idx.size == 0:
            raise ValidationError("instance must own at least one point")
        member = points[idx]
        center = member.mean(axis=0)
        radius = float(np.linalg.norm(member - center, axis=1).max())
        return cls(idx, center, radius)


@dataclass
class SceneAnnotation:
    """Instance decomposition of one scene; every point is fruit or background."""

    instances: list[FruitInstance]
    background_indices: np.ndarray
    per_point_semantic: np.ndarray

    def __post_init__(self):
        self.background_indices = np.asarray(self.background_indices, dtype=np.int64).ravel()
        self.per_point_semantic = np.asarray(self.per_point_semantic, dtype=np.uint8).ravel()

    @classmethod
    def from_instance_ids(cls, points: np.ndarray, ids: np.ndarray) -> "SceneAnnotation":
        """Reconstruct instances from a per-point id column (-1 = background)."""
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.shape[0] != points.shape[0]:
            raise ValidationError("instance id column length does not match point count")
        instances = []
        for uid in np.unique(ids[ids != BACKGROUND_ID]):
            instances.append(FruitInstance.from_points(points, np.flatnonzero(ids == uid)))
        semantic = np.where(ids == BACKGROUND_ID, SEMANTIC_BACKGROUND, SEMANTIC_FRUIT).astype(np.uint8)
        return cls(instances, np.flatnonzero(ids == BACKGROUND_ID), semantic)

    def instance_ids(self, n_points: int) -> np.ndarray:
        """Per-point instance id column, -1 for background."""
        ids = np.full(n_points, BACKGROUND_ID, dtype=np.int64)
        for k, inst in enumerate(self.instances):
            ids[inst.point_indices] = k
        return ids

    def validate(self, n_points: int) -> None:
        """Check the instance/background partition and the semantic column."""
        seen = np.zeros(n_points, dtype=np.int64)
        for inst in self.instances:
            if inst.point_indices.size and (
                inst.point_indices.min() < 0 or inst.point_indices.max() >= n_points
            ):
                raise ValidationError("instance point index out of range")
            seen[inst.point_indices] += 1
        seen[self.background_indices] += 1
        if not (seen == 1).all():
            raise ValidationError("instances + background must partition the points")
        if self.per_point_semantic.shape[0] != n_points:
            raise ValidationError("semantic column length mismatch")
        expected = np.full(n_points, SEMANTIC_FRUIT, dtype=np.uint8)
        expected[self.background_indices] = SEMANTIC_BACKGROUND
        if not (self.per_point_semantic == expected).all():
            raise ValidationError("semantic labels disagree with the instance partition")


# sentinel meaning "no predecessor" inside TemporalAssociation.pairs
NO_MATCH = None
_NO_MATCH_CSV = -1


@dataclass
class TemporalAssociation:
    """Maps instance index at time t to its index at time t-1, or None."""

    pairs: dict[int, int | None] = field(default_factory=dict)

    def __post_init__(self):
        matched = [v for v in self.pairs.values() if v is not None]
        if len(matched) != len(set(matched)):
            raise ValidationError("association is not injective on matched instances")

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_id", "prev_id"])
            for t_id in sorted(self.pairs):
                prev = self.pairs[t_id]
                writer.writerow([t_id, _NO_MATCH_CSV if prev is None else prev])

    @classmethod
    def load_csv(cls, path: str | Path) -> "TemporalAssociation":
        pairs: dict[int, int | None] = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t_id", "prev_id"]:
                raise ValidationError(f"{path}: expected header 't_id,prev_id'")
            for row in reader:
                if not row:
                    continue
                if len(row) != 2:
                    raise ValidationError(f"{path}: malformed row {row!r}")
                t_id, prev = int(row[0]), int(row[1])
                pairs[t_id] = None if prev == _NO_MATCH_CSV else prev
        return cls(pairs)


@dataclass
class AugmentConfig:
    """Random transform ranges; zero ranges / sigmas leave the cloud unchanged.

    Applied in a fixed order: rotation, flips, scale, point jitter, color
    jitter.  Geometric transforms pivot on the point centroid.
    """

    yaw_range_deg: tuple[float, float] = (0.0, 0.0)
    per_axis_rotation_range_deg: tuple[float, float] = (0.0, 0.0)
    flip_axes: tuple[int, ...] = ()
    scale_range: tuple[float, float] = (1.0, 1.0)
    point_jitter_sigma: float = 0.0
    color_jitter_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("yaw_range_deg", "per_axis_rotation_range_deg", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is not a valid range: {(lo, hi)}")
        if self.point_jitter_sigma < 0 or self.color_jitter_sigma < 0:
            raise ConfigError("jitter sigmas must be non-negative")
        if any(a not in (0, 1, 2) for a in self.flip_axes):
            raise ConfigError("flip_axes entries must be axis indices 0..2")


def _rotation(axis: int, angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    m = np.eye(3)
    a, b = [(1, 2), (0, 2), (0, 1)][axis]
    m[a, a] = c
    m[a, b] = -s
    m[b, a] = s
    m[b, b] = c
    return m


def augment(
    cloud: ColoredCloud,
    annotation: SceneAnnotation | None,
    config: AugmentConfig,
    *,
    rng: np.random.Generator | None = None,
) -> tuple[ColoredCloud, SceneAnnotation | None]:
    """Randomly transform a cloud; instance centers/radii are recomputed."""
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    pts = cloud.points.copy()
    cols = cloud.colors.copy()
    centroid = pts.mean(axis=0) if len(cloud) else np.zeros(3)

    rot = np.eye(3)
    lo, hi = np.deg2rad(config.yaw_range_deg)
    if hi > lo or lo != 0.0:
        rot = _rotation(2, rng.uniform(lo, hi)) @ rot
    lo, hi = np.deg2rad(config.per_axis_rotation_range_deg)
    if hi > lo or lo != 0.0:
        for axis in range(3):
            rot = _rotation(axis, rng.uniform(lo, hi)) @ rot
    if not np.array_equal(rot, np.eye(3)):
        pts = (pts - centroid) @ rot.T + centroid
    for axis in config.flip_axes:
        if rng.random() < 0.5:
            pts[:, axis] = 2.0 * centroid[axis] - pts[:, axis]
    lo, hi = config.scale_range
    if (lo, hi) != (1.0, 1.0):
        pts = centroid + rng.uniform(lo, hi) * (pts - centroid)
    if config.point_jitter_sigma > 0:
        pts = pts + rng.normal(0.0, config.point_jitter_sigma, pts.shape)
    if config.color_jitter_sigma > 0:
        cols = np.clip(cols + rng.normal(0.0, config.color_jitter_sigma, cols.shape), 0.0, 1.0)

    out = ColoredCloud(pts, cols)
    if annotation is None:
        return out, None
    instances = [FruitInstance.from_points(pts, inst.point_indices) for inst in annotation.instances]
    new_ann = SceneAnnotation(instances, annotation.background_indices, annotation.per_point_semantic)
    return out, new_ann


def crop_box(
    cloud: ColoredCloud,
    annotation: SceneAnnotation | None,
    center: np.ndarray,
    width: float,
    *,
    axis: int = 0,
) -> tuple[ColoredCloud, SceneAnnotation | None]:
    """Keep points with |p[axis] - center[axis]| <= width / 2 (the row axis by default)."""
    if width < 0:
        raise ConfigError("crop width must be non-negative")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    keep = np.abs(cloud.points[:, axis] - center[axis]) <= width / 2.0
    new_index = np.cumsum(keep) - 1
    out = ColoredCloud(cloud.points[keep], cloud.colors[keep])
    if annotation is None:
        return out, None
    instances = []
    for inst in annotation.instances:
        kept = inst.point_indices[keep[inst.point_indices]]
        if kept.size:
            instances.append(FruitInstance.from_points(out.points, new_index[kept]))
    bg = annotation.background_indices[keep[annotation.background_indices]]
    new_ann = SceneAnnotation(
        instances, new_index[bg], annotation.per_point_semantic[keep]
    )
    return out, new_ann


# ---------------------------------------------------------------------------
# PLY I/O

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def instance_palette(n: int) -> np.ndarray:
    """Deterministic, well-separated RGB per instance (golden-angle hues)."""
    out = np.empty((n, 3), dtype=np.float64)
    for k in range(n):
        out[k] = colorsys.hsv_to_rgb((0.61803398875 * k) % 1.0, 0.85, 0.95)
    return out


def save_ply(
    path: str | Path,
    cloud: ColoredCloud,
    annotation: SceneAnnotation | None = None,
    *,
    binary: bool = True,
) -> None:
    """Write a cloud (optionally annotated) as PLY.

    Coordinates are stored as float32, colors as uint8.  With an annotation,
    instance_id/semantic columns and a per-instance display color are added.
    """
    n = len(cloud)
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if annotation is not None:
        annotation.validate(n)
        fields += [("instance_id", "i4"), ("semantic", "u1"),
                   ("disp_red", "u1"), ("disp_green", "u1"), ("disp_blue", "u1")]
    rec = np.empty(n, dtype=[(name, "<" + code) for name, code in fields])
    pts32 = cloud.points.astype("<f4")
    rec["x"], rec["y"], rec["z"] = pts32[:, 0], pts32[:, 1], pts32[:, 2]
    cols8 = np.rint(cloud.colors * 255.0).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = cols8[:, 0], cols8[:, 1], cols8[:, 2]
    if annotation is not None:
        ids = annotation.instance_ids(n)
        rec["instance_id"] = ids.astype("<i4")
        rec["semantic"] = annotation.per_point_semantic
        disp = np.ones((n, 3), dtype=np.float64)  # background renders white
        palette = instance_palette(len(annotation.instances))
        for k, inst in enumerate(annotation.instances):
            disp[inst.point_indices] = palette[k]
        disp8 = np.rint(disp * 255.0).astype(np.uint8)
        rec["disp_red"], rec["disp_green"], rec["disp_blue"] = disp8[:, 0], disp8[:, 1], disp8[:, 2]

    type_names = {"f4": "float", "u1": "uchar", "i4": "int"}
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property {type_names[code]} {name}" for name, code in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec.tofile(fh)
        else:
            buf = io.StringIO()
            for row in rec:
                cells = []
                for name, code in fields:
                    v = row[name]
                    # %.9g round-trips float32 exactly
                    cells.append(f"{float(v):.9g}" if code == "f4" else str(int(v)))
                buf.write(" ".join(cells) + "\n")
            fh.write(buf.getvalue().encode("ascii"))


def _parse_ply_header(fh) -> tuple[str, int, list[tuple[str, str]], int]:
    """Return (format, vertex_count, vertex properties, data offset)."""
    line = fh.readline()
    if line.strip() != b"ply":
        raise PlyParseError("not a PLY file: missing 'ply' magic line")
    fmt = None
    elements: list[tuple[str, int]] = []
    props: dict[str, list[tuple[str, str]]] = {}
    current = None
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyParseError("unexpected end of file inside header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment"):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unsupported format line: {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError(f"malformed element line: {line!r}")
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise PlyParseError(f"malformed element count in: {line!r}") from exc
            current = parts[1]
            elements.append((current, count))
            props[current] = []
        elif parts[0] == "property":
            if current is None:
                raise PlyParseError(f"property before any element: {line!r}")
            if parts[1] == "list":
                raise PlyParseError(f"list properties are unsupported: {line!r}")
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise PlyParseError(f"malformed property line: {line!r}")
            props[current].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyParseError(f"unrecognized header line: {line!r}")
    if fmt is None:
        raise PlyParseError("header has no format line")
    if not elements or elements[0][0] != "vertex":
        raise PlyParseError("first element must be 'vertex'")
    return fmt, elements[0][1], props["vertex"], fh.tell()


def load_ply(path: str | Path) -> tuple[ColoredCloud, SceneAnnotation | None]:
    """Read a PLY written by save_ply (or compatible); unknown vertex properties are ignored."""
    with open(path, "rb") as fh:
        fmt, count, vprops, offset = _parse_ply_header(fh)
        names = [name for name, _ in vprops]
        for req in ("x", "y", "z", "red", "green", "blue"):
            if req not in names:
                raise PlyParseError(f"vertex element lacks required property {req!r}")
        dtype = np.dtype([(name, "<" + code) for name, code in vprops])
        if fmt == "binary_little_endian":
            rec = np.fromfile(fh, dtype=dtype, count=count)
            if rec.shape[0] != count:
                raise PlyParseError(f"expected {count} vertices, file holds {rec.shape[0]}")
        else:
            rows = []
            for i in range(count):
                line = fh.readline()
                if not line:
                    raise PlyParseError(f"expected {count} vertices, file ends at {i}")
                cells = line.split()
                if len(cells) != len(vprops):
                    raise PlyParseError(f"vertex {i}: expected {len(vprops)} columns, got {len(cells)}")
                rows.append(tuple(cells))
            rec = np.array(rows, dtype=dtype) if rows else np.empty(0, dtype=dtype)

    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64) if count else np.zeros((0, 3))
    if count and not np.isfinite(pts).all():
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise ValidationError(f"non-finite coordinate at vertex {bad}")
    cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) if count else np.zeros((0, 3))
    color_types = {name: code for name, code in vprops}
    if color_types["red"].startswith(("u", "i")):
        cols = cols / 255.0
    cloud = ColoredCloud(pts, np.clip(cols, 0.0, 1.0))
    if "instance_id" not in names:
        return cloud, None
    ann = SceneAnnotation.from_instance_ids(pts, rec["instance_id"].astype(np.int64)) if count else SceneAnnotation(
        [], np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.uint8)
    )
    return cloud, ann
