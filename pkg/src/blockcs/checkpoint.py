"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BCS1"                      magic
    u32 version                  currently 1
    u32 B, u32 M, u32 c, u32 K   model config
    f64 rate
    u32 tensor count
      per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim],
                  float32 data (row-major)
    u32 blob count
      per blob:   u16 name length, UTF-8 name, u32 byte length, bytes

Parameters are stored under their model names, Adam moments as
``adam.m/<name>`` and ``adam.v/<name>``.  Blob ``meta`` holds canonical JSON
(method, counters, optimizer scalars, training config) and blob ``rng`` the
32-byte crop generator state.  Writing is canonical, so save -> load -> save
reproduces the file byte for byte.
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from blockcs.kernels import AdamState
from blockcs.model import METHODS, ModelConfig, parameter_shapes

MAGIC = b"BCS1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    method: str
    params: dict
    adam: AdamState
    rng_state: bytes
    step: int = 0
    epoch: int = 0
    iterator_epoch: int = 0
    iterator_cursor: int = 0
    train: dict = field(default_factory=dict)


def _meta(ckpt):
    return {
        "method": ckpt.method,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "iterator": {"epoch": ckpt.iterator_epoch, "cursor": ckpt.iterator_cursor},
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "train": ckpt.train,
    }


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_tensor(name, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    out = [_pack_name(name), struct.pack("<B", array.ndim)]
    out.append(struct.pack(f"<{array.ndim}I", *array.shape))
    out.append(array.tobytes())
    return b"".join(out)


def to_bytes(ckpt):
    cfg = ckpt.config
    names = list(parameter_shapes(cfg, ckpt.method))
    tensors = [(n, ckpt.params[n]) for n in names]
    tensors += [(f"adam.m/{n}", ckpt.adam.m[n]) for n in names]
    tensors += [(f"adam.v/{n}", ckpt.adam.v[n]) for n in names]
    blobs = [
        ("meta", json.dumps(_meta(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")),
        ("rng", bytes(ckpt.rng_state)),
    ]
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack(
            "<4Id", cfg.block_size, cfg.measurement_count, cfg.lift_channels,
            cfg.residual_blocks, cfg.measurement_rate,
        ),
        struct.pack("<I", len(tensors)),
    ]
    parts += [_pack_tensor(name, arr) for name, arr in tensors]
    parts.append(struct.pack("<I", len(blobs)))
    for name, blob in blobs:
        parts += [_pack_name(name), struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self, what):
        (n,) = self.unpack("<H", f"{what} name length")
        try:
            return self.take(n, f"{what} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{what} name is not valid UTF-8") from None


def from_bytes(data):
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("magic: not a blockcs checkpoint (expected b'BCS1')")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"version: unsupported checkpoint version {version}")
    B, M, c, K, rate = r.unpack("<4Id", "config")
    try:
        config = ModelConfig(B, rate, c, K)
    except ValueError as exc:
        raise CheckpointError(f"config: {exc}") from None
    if config.measurement_count != M:
        raise CheckpointError(
            f"config: measurement count {M} inconsistent with B={B}, rate={rate} "
            f"(expected {config.measurement_count})"
        )
    tensors = {}
    (count,) = r.unpack("<I", "tensor count")
    for _ in range(count):
        name = r.name("tensor")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        dims = r.unpack(f"<{ndim}I", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * size, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    blobs = {}
    (count,) = r.unpack("<I", "blob count")
    for _ in range(count):
        name = r.name("blob")
        (n,) = r.unpack("<I", f"{name} length")
        blobs[name] = r.take(n, f"{name} blob")
    if r.pos != len(data):
        raise CheckpointError(f"trailing data: {len(data) - r.pos} unexpected bytes after blobs")

    for required in ("meta", "rng"):
        if required not in blobs:
            raise CheckpointError(f"{required}: missing blob")
    try:
        meta = json.loads(blobs["meta"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"meta: malformed JSON ({exc})") from None
    method = meta.get("method")
    if method not in METHODS:
        raise CheckpointError(f"method: expected one of {METHODS}, got {method!r}")
    if len(blobs["rng"]) != 32:
        raise CheckpointError(f"rng: expected 32 bytes, got {len(blobs['rng'])}")

    shapes = parameter_shapes(config, method)
    expected = set(shapes) | {f"adam.{k}/{n}" for k in "mv" for n in shapes}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointError(f"tensors: missing {missing}, unexpected {extra}")
    for name, shape in shapes.items():
        for key in (name, f"adam.m/{name}", f"adam.v/{name}"):
            if tensors[key].shape != shape:
                raise CheckpointError(f"{key}: shape {tensors[key].shape} does not match config {shape}")

    a = meta["adam"]
    adam = AdamState(
        m={n: tensors[f"adam.m/{n}"] for n in shapes},
        v={n: tensors[f"adam.v/{n}"] for n in shapes},
        t=int(a["t"]), beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
    )
    return Checkpoint(
        config=config,
        method=method,
        params={n: tensors[n] for n in shapes},
        adam=adam,
        rng_state=blobs["rng"],
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
        iterator_epoch=int(meta["iterator"]["epoch"]),
        iterator_cursor=int(meta["iterator"]["cursor"]),
        train=meta["train"],
    )


def save_checkpoint(ckpt, path):
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
