"""Binary checkpoint format for ModelGraph weights and running statistics.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic b"ADENETCK"
    8       4     u32 format version (currently 1)
    12      4     u32 metadata length M
    16      M     metadata, UTF-8 JSON: name, in_channels, n_classes, seed,
                  meta, and the layer list (kind + hyperparameters)
    16+M    4     u32 tensor count T
    ...           T shape-table entries:
                    u16 name length, name (UTF-8, "layer.tensor"),
                    u8 ndim, ndim x u32 dims
    ...           payload: every tensor as float32 '<f4', table order, C order
    end-4   4     u32 CRC-32 (zlib) of every preceding byte

Tensors are stored as 32-bit floats, so round trips are bit-exact for
float32 models; float64 models are rounded on save.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .models import LayerSpec, ModelGraph

MAGIC = b"ADENETCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


def _tensors(model):
    for i, layer in enumerate(model.layers):
        for group in (layer.params, layer.stats):
            for k, v in group.items():
                yield f"{i}.{k}", v


def to_bytes(model):
    meta = {
        "name": model.name, "in_channels": model.in_channels, "n_classes": model.n_classes,
        "seed": model.seed, "meta": model.meta,
        "layers": [{"kind": l.kind, "hyper": l.hyper,
                    "params": list(l.params), "stats": list(l.stats)} for l in model.layers],
    }
    mbytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = list(_tensors(model))
    parts = [MAGIC, struct.pack("<II", VERSION, len(mbytes)), mbytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpoint(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf):
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagic("not an AdeNet checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    version, mlen = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, this build reads {VERSION}")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        table.append((name, r.unpack(f"<{ndim}I")))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    (stored,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:-4]) != stored:
        raise ChecksumMismatch("checkpoint checksum mismatch")

    layers = []
    for i, spec in enumerate(meta["layers"]):
        try:
            params = {k: arrays.pop(f"{i}.{k}") for k in spec["params"]}
            stats = {k: arrays.pop(f"{i}.{k}") for k in spec["stats"]}
        except KeyError as exc:
            raise CheckpointError(f"shape table lacks tensor {exc}") from None
        layers.append(LayerSpec(spec["kind"], spec["hyper"], params, stats))
    if arrays:
        raise CheckpointError(f"unexpected tensors {sorted(arrays)}")
    return ModelGraph(layers, meta["name"], meta["in_channels"], meta["n_classes"],
                      meta["seed"], "infer", meta["meta"])


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
