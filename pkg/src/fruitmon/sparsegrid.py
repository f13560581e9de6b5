"""Sparse voxel grids over point clouds.

Quantization at a configurable voxel size, per-fruit support extraction,
and the kernel neighbor maps that drive sparse 3D convolutions.  Voxels are
kept in one deterministic order (sorted packed keys), so identical inputs
always yield identical tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import ColoredCloud
from .errors import ConfigError, ValidationError
from .util import pack_coords


@dataclass
class SparseVoxelTensor:
    """Occupied voxel coordinates plus one feature row per voxel.

    ``coords`` are integers in base-voxel units and are multiples of
    ``stride`` (stride 2^k after k downsamplings).
    """

    coords: np.ndarray
    features: np.ndarray
    voxel_size: float
    stride: int = 1

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise ValidationError("features must be (N, C) aligned with coords")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.coords.size and (self.coords % self.stride).any():
            raise ValidationError("coords must be multiples of the stride")
        if self.coords.shape[0]:
            keys = pack_coords(self.coords)
            if np.unique(keys).size != keys.size:
                raise ValidationError("duplicate voxel coordinates")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class VoxelMap:
    """Bidirectional point/voxel correspondence produced by voxelize."""

    point_to_voxel: np.ndarray
    voxel_to_points: list[np.ndarray]


def voxelize(cloud: ColoredCloud, voxel_size: float) -> tuple[SparseVoxelTensor, VoxelMap]:
    """Quantize points to floor(p / v); per-voxel feature is the mean member RGB."""
    if voxel_size <= 0:
        raise ConfigError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        tensor = SparseVoxelTensor(np.zeros((0, 3), np.int64), np.zeros((0, 3)), voxel_size)
        return tensor, VoxelMap(np.zeros(0, np.int64), [])
    idx = np.floor(cloud.points / voxel_size).astype(np.int64)
    keys = pack_coords(idx)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    group_start = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    counts = np.diff(np.r_[group_start, n])
    coords = idx[order[group_start]]
    features = np.add.reduceat(cloud.colors[order], group_start, axis=0) / counts[:, None]
    point_to_voxel = np.empty(n, dtype=np.int64)
    voxel_rank = np.repeat(np.arange(group_start.size), counts)
    point_to_voxel[order] = voxel_rank
    voxel_to_points = np.split(order, group_start[1:])
    return SparseVoxelTensor(coords, features, voxel_size), VoxelMap(point_to_voxel, list(voxel_to_points))


def support(cloud: ColoredCloud, center: np.ndarray, radius: float) -> ColoredCloud:
    """Points within ``radius`` of ``center``, re-centered on it."""
    if radius <= 0:
        raise ConfigError("support radius must be positive")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    d2 = ((cloud.points - center) ** 2).sum(axis=1)
    keep = d2 <= radius * radius
    return ColoredCloud(cloud.points[keep] - center, cloud.colors[keep])


def kernel_offsets(kernel: int) -> np.ndarray:
    """The kernel's integer offsets in fixed lexicographic order."""
    if kernel == 1:
        return np.zeros((1, 3), dtype=np.int64)
    if kernel == 3:
        r = (-1, 0, 1)
        return np.array([(i, j, k) for i in r for j in r for k in r], dtype=np.int64)
    raise ConfigError(f"kernel must be 1 or 3, got {kernel}")


@dataclass
class KernelMap:
    """Gather plan for one sparse convolution.

    ``pairs[o] = (out_rows, in_rows)``: input voxel ``in_rows[i]`` sits at
    ``out_coords[out_rows[i]] + offsets[o] * in_stride``.
    """

    out_coords: np.ndarray
    out_stride: int
    offsets: np.ndarray
    pairs: list[tuple[np.ndarray, np.ndarray]]
    out_batch: np.ndarray | None = None

    @property
    def n_out(self) -> int:
        return self.out_coords.shape[0]


def _unique_sorted(coords: np.ndarray, batch: np.ndarray | None):
    keys = pack_coords(coords, batch)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    first = np.flatnonzero(np.r_[True, sk[1:] != sk[:-1]])
    sel = order[first]
    return coords[sel], (None if batch is None else batch[sel]), keys

def kernel_map(
    coords: np.ndarray,
    in_stride: int,
    *,
    kernel: int,
    stride: int,
    batch: np.ndarray | None = None,
) -> KernelMap:
    """Neighbor lists for a sparse conv over ``coords`` (optionally batched)."""
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    offsets = kernel_offsets(kernel)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    in_keys = pack_coords(coords, batch)
    in_order = np.argsort(in_keys, kind="stable")
    sorted_in = in_keys[in_order]

    if stride == 1:
        out_coords, out_batch = coords, batch
        out_stride = in_stride
    else:
        out_stride = 2 * in_stride
        halved = np.floor_divide(coords, out_stride) * out_stride
        out_coords, out_batch, _ = _unique_sorted(halved, batch)
        out_stride = int(out_stride)

    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for off in offsets:
        probe = pack_coords(out_coords + off * in_stride, out_batch)
        pos = np.searchsorted(sorted_in, probe)
        pos_clipped = np.minimum(pos, sorted_in.size - 1) if sorted_in.size else pos
        hit = sorted_in.size > 0
        match = (pos < sorted_in.size) & (sorted_in[pos_clipped] == probe) if hit else np.zeros(len(probe), bool)
        out_rows = np.flatnonzero(match)
        in_rows = in_order[pos_clipped[match]] if hit else np.zeros(0, np.int64)
        pairs.append((out_rows, in_rows))
    return KernelMap(out_coords, out_stride, offsets, pairs, out_batch)


def kernel_neighbors(tensor: SparseVoxelTensor, kernel: int, stride: int) -> KernelMap:
    """Convenience wrapper over kernel_map for a single (unbatched) tensor."""
    return kernel_map(tensor.coords, tensor.stride, kernel=kernel, stride=stride)


def halving_parents(
    fine_coords: np.ndarray,
    fine_stride: int,
    coarse_coords: np.ndarray,
    *,
    fine_batch: np.ndarray | None = None,
    coarse_batch: np.ndarray | None = None,
) -> np.ndarray:
    """Index of each fine voxel's floor-halved parent in ``coarse_coords``.

    Used by the decoder's neighbor-scatter upsampling; every parent must
    exist because the coarse level was built by the matching downsampling.
    """
    parent = np.floor_divide(fine_coords, 2 * fine_stride) * (2 * fine_stride)
    parent_keys = pack_coords(parent, fine_batch)
    coarse_keys = pack_coords(coarse_coords, coarse_batch)
    order = np.argsort(coarse_keys, kind="stable")
    pos = np.searchsorted(coarse_keys[order], parent_keys)
    if pos.size and (pos >= coarse_keys.size).any():
        raise ValidationError("fine voxel without a coarse parent")
    idx = order[pos]
    if pos.size and not (coarse_keys[idx] == parent_keys).all():
        raise ValidationError("fine voxel without a coarse parent")
    return idx
