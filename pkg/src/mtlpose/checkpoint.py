"""Binary checkpoint files.

Little-endian layout::

    b"MTPE"                      magic
    u32 version                  currently 1
    u32 record_count
    record_count x {
        u32 name_len, name (UTF-8)
        u8  kind tag             see KIND_TAGS
        u32 stride, u32 filter, u32 in_extent, u32 out_extent
    }
    for each parameter in spec order {
        u32 rank, rank x u32 extent, prod(extents) x f32
    }

Two records carry the network's global shape: ``input`` (filter = input
side length, in/out = channels) and ``tasks`` (filter = joints, in =
parts, out = windows). The remaining records mirror
:meth:`NetworkSpec.layers`.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from .errors import (BadMagicError, CheckpointError, CheckpointShapeError,
                     TruncatedCheckpointError, VersionMismatchError)
from .network import ConvStage, LayerInfo, NetworkSpec, NetworkState

MAGIC = b"MTPE"
VERSION = 1
KIND_TAGS = {"input": 0, "conv": 1, "relu": 2, "pool": 3, "dense": 4, "dropout": 5,
             "tanh": 6, "logistic": 7, "tasks": 8}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def _records(spec: NetworkSpec) -> list[LayerInfo]:
    return [
        LayerInfo("input", "input", 1, spec.input_size, spec.input_channels, spec.input_channels),
        LayerInfo("tasks", "tasks", 1, spec.joints, spec.parts, spec.windows),
    ] + spec.layers()


def dumps(state: NetworkState, spec: NetworkSpec) -> bytes:
    state.check(spec)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    recs = _records(spec)
    buf.write(struct.pack("<I", len(recs)))
    for r in recs:
        name = r.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BIIII", KIND_TAGS[r.kind], r.stride, r.filter_size,
                              r.in_extent, r.out_extent))
    for key in spec.param_shapes():
        arr = np.ascontiguousarray(state.params[key], dtype="<f4")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(state: NetworkState, spec: NetworkSpec, path) -> None:
    data = dumps(state, spec)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"file ends at byte {len(self.data)} while reading {what} ({n} bytes at {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _spec_from_records(recs: list[LayerInfo]) -> NetworkSpec:
    by_name = {r.name: r for r in recs}
    try:
        inp, tasks = by_name["input"], by_name["tasks"]
        convs = [r for r in recs if r.kind == "conv"]
        pools = [r for r in recs if r.kind == "pool"]
        if len(convs) != len(pools):
            raise CheckpointShapeError("every conv layer needs a matching pool layer")
        trunk = tuple(ConvStage(c.out_extent, c.filter_size, c.stride, p.filter_size, p.stride)
                      for c, p in zip(convs, pools))
        hidden = (by_name["reg.fc1"].out_extent, by_name["reg.fc2"].out_extent)
        spec = NetworkSpec(inp.in_extent, inp.filter_size, trunk, hidden,
                           tasks.filter_size, tasks.in_extent, tasks.out_extent)
    except KeyError as exc:
        raise CheckpointShapeError(f"spec block lacks record {exc}") from None
    except ValueError as exc:
        raise CheckpointShapeError(f"inconsistent spec block: {exc}") from None
    if _records(spec) != recs:
        raise CheckpointShapeError("spec block does not describe a consistent network")
    return spec


def loads(data: bytes):
    rd = _Reader(data)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = rd.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (count,) = rd.unpack("<I", "record count")
    recs = []
    for i in range(count):
        (n,) = rd.unpack("<I", f"record {i} name length")
        try:
            name = rd.take(n, f"record {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"record {i} name is not UTF-8") from exc
        tag, stride, filt, a, b = rd.unpack("<BIIII", f"record {i}")
        if tag not in TAG_KINDS:
            raise CheckpointError(f"record {name!r} has unknown kind tag {tag}")
        recs.append(LayerInfo(name, TAG_KINDS[tag], stride, filt, a, b))
    spec = _spec_from_records(recs)
    params = {}
    for key, shape in spec.param_shapes().items():
        (rank,) = rd.unpack("<I", f"{key} rank")
        extents = rd.unpack(f"<{rank}I", f"{key} extents")
        if tuple(extents) != shape:
            raise CheckpointShapeError(f"{key}: stored shape {tuple(extents)}, spec implies {shape}")
        n = int(np.prod(shape))
        raw = rd.take(4 * n, f"{key} data")
        params[key] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if rd.pos != len(data):
        raise CheckpointError(f"{len(data) - rd.pos} trailing bytes after last tensor")
    return NetworkState(params), spec


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
