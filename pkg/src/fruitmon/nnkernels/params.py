"""Parameter storage, initialization, Adam, and checkpoint serialization.

Checkpoint layout: magic string, little-endian uint32 header length, JSON
header (kind, config, tensor manifest), then per tensor a little-endian
uint32 element count followed by raw little-endian float32 data.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ShapeError, ValidationError
from .tape import Var

CHECKPOINT_MAGIC = b"FMNK0001\n"


class ParamStore:
    """Named parameters (trained) and buffers (BN running statistics)."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self.params: dict[str, Var] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate parameter name {name!r}")
        var = Var(value)
        self.params[name] = var
        return var

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        arr = np.asarray(value, dtype=np.float64).copy()
        self.buffers[name] = arr
        return arr

    def zero_grads(self) -> None:
        for var in self.params.values():
            var.zero_grad()

    def n_parameters(self) -> int:
        return sum(v.value.size for v in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {name: var.value.copy() for name, var in self.params.items()}
        snap.update({name: buf.copy() for name, buf in self.buffers.items()})
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, var in self.params.items():
            var.value[...] = snap[name]
        for name, buf in self.buffers.items():
            buf[...] = snap[name]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_param(store: ParamStore, name: str, rng, kernel: int, c_in: int, c_out: int) -> Var:
    k3 = kernel ** 3
    return store.add_param(name, uniform_init(rng, (k3, c_in, c_out), k3 * c_in))


def linear_param(store: ParamStore, name: str, rng, c_in: int, c_out: int) -> tuple[Var, Var]:
    w = store.add_param(f"{name}.w", uniform_init(rng, (c_in, c_out), c_in))
    b = store.add_param(f"{name}.b", np.zeros(c_out))
    return w, b


@dataclass
class BnParams:
    gain: Var
    bias: Var
    running_mean: np.ndarray
    running_var: np.ndarray


def bn_param(store: ParamStore, name: str, channels: int) -> BnParams:
    return BnParams(
        gain=store.add_param(f"{name}.gain", np.ones(channels)),
        bias=store.add_param(f"{name}.bias", np.zeros(channels)),
        running_mean=store.add_buffer(f"{name}.running_mean", np.zeros(channels)),
        running_var=store.add_buffer(f"{name}.running_var", np.ones(channels)),
    )


def encoder_layer_params(store: ParamStore, prefix: str, rng, dim: int, ff_dim: int) -> dict:
    """Parameter dict consumed by ops.mhsa_encoder_layer."""
    p = {}
    for proj in ("wq", "wk", "wv", "wo"):
        p[proj] = store.add_param(f"{prefix}.{proj}", uniform_init(rng, (dim, dim), dim))
        p["b" + proj[1]] = store.add_param(f"{prefix}.b{proj[1]}", np.zeros(dim))
    p["ff1.w"] = store.add_param(f"{prefix}.ff1.w", uniform_init(rng, (dim, ff_dim), dim))
    p["ff1.b"] = store.add_param(f"{prefix}.ff1.b", np.zeros(ff_dim))
    p["ff2.w"] = store.add_param(f"{prefix}.ff2.w", uniform_init(rng, (ff_dim, dim), ff_dim))
    p["ff2.b"] = store.add_param(f"{prefix}.ff2.b", np.zeros(dim))
    for ln in ("ln1", "ln2"):
        p[f"{ln}.gain"] = store.add_param(f"{prefix}.{ln}.gain", np.ones(dim))
        p[f"{ln}.bias"] = store.add_param(f"{prefix}.{ln}.bias", np.zeros(dim))
    return p


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    store: ParamStore,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update over every parameter with an accumulated gradient."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name in sorted(store.params):
        var = store.params[name]
        if var.grad is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(var.value))
        v = state.v.setdefault(name, np.zeros_like(var.value))
        m[...] = b1 * m + (1.0 - b1) * var.grad
        v[...] = b2 * v + (1.0 - b2) * var.grad ** 2
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        var.value[...] = var.value - lr * m_hat / (np.sqrt(v_hat) + eps)


def save_checkpoint(path: str | Path, store: ParamStore, *, kind: str, config: dict) -> None:
    """Serialize a ParamStore; values are cast to float32 on disk."""
    manifest = []
    tensors = []
    for group, table in (("param", store.params), ("buffer", store.buffers)):
        for name in sorted(table):
            value = table[name].value if group == "param" else table[name]
            manifest.append({"name": name, "group": group, "shape": list(value.shape)})
            tensors.append(np.ascontiguousarray(value, dtype="<f4"))
    header = {
        "kind": kind,
        "config": config,
        "rng_seed": store.rng_seed,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in tensors:
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Read a checkpoint back; returns (store, header)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a fruitmon checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        store = ParamStore(header.get("rng_seed", 0))
        for entry in header["tensors"]:
            (count,) = struct.unpack("<I", fh.read(4))
            shape = tuple(entry["shape"])
            expected = int(np.prod(shape)) if shape else 1
            if count != expected:
                raise ValidationError(
                    f"{path}: tensor {entry['name']!r} holds {count} values, expected {expected}"
                )
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValidationError(f"{path}: truncated tensor {entry['name']!r}")
            data = np.frombuffer(raw, dtype="<f4", count=count)
            value = data.astype(np.float64).reshape(shape)
            if entry["group"] == "param":
                store.add_param(entry["name"], value)
            else:
                store.add_buffer(entry["name"], value)
    return store, header


def check_kind(header: dict, expected: str, path) -> None:
    if header.get("kind") != expected:
        raise ShapeError(f"{path}: checkpoint kind {header.get('kind')!r}, expected {expected!r}")
