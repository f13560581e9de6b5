"""Small shared helpers: seeded RNG streams and voxel-key packing."""
from __future__ import annotations

import hashlib
import json

import numpy as np

# Named sub-streams derived from one command-level seed, so data generation,
# weight init and augmentation draw from independent generators.
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_AUGMENT = 2


def stream(seed: int, which: int) -> np.random.Generator:
    """Return the deterministic named sub-stream of a command seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(which),)))


# 19 bits per axis leaves room for a batch id in the top bits of an int64 key.
_PACK_BITS = 19
_PACK_OFFSET = 1 << (_PACK_BITS - 1)
_PACK_SPAN = 1 << _PACK_BITS
_BATCH_SHIFT = 3 * _PACK_BITS
MAX_BATCH = (1 << (63 - _BATCH_SHIFT)) - 1  # ids representable above the spatial bits


def pack_coords(coords: np.ndarray, batch: np.ndarray | None = None) -> np.ndarray:
    """Pack integer (N, 3) voxel coordinates (plus optional batch id) into sortable int64 keys.

    Keys preserve lexicographic (batch, i, j, k) order, which gives every
    consumer a single deterministic ordering of voxels.
    """
    c = np.asarray(coords, dtype=np.int64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"expected (N, 3) integer coordinates, got shape {c.shape}")
    shifted = c + _PACK_OFFSET
    if shifted.size and (shifted.min() < 0 or shifted.max() >= _PACK_SPAN):
        raise ValueError("voxel coordinate outside the packable +-2^18 range")
    keys = (shifted[:, 0] << (2 * _PACK_BITS)) | (shifted[:, 1] << _PACK_BITS) | shifted[:, 2]
    if batch is not None:
        b = np.asarray(batch, dtype=np.int64)
        if b.size and (b.min() < 0 or b.max() > MAX_BATCH):
            raise ValueError("batch id outside packable range")
        keys = keys | (b << _BATCH_SHIFT)
    return keys


def canonical_json(obj) -> str:
    """Stable JSON encoding used for config hashing and sidecar files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
