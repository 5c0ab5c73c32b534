"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"LKWSCKPT"
    version      u32
    count        u32       number of tensor records
    records      count x { u16 name_len, name (utf-8), u8 dtype code,
                           u8 rank, u32 extent * rank, raw data }
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON (sorted keys)
    trailer      4 bytes   b"LKWE"

dtype codes: 0 = float32, 1 = float64, 2 = int64.  Tensor records come in
canonical order: model parameters in construction order, then batch-norm
buffers (``<bn>.running_mean`` / ``<bn>.running_var``), then optimizer
velocities (``optim.<param>``).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    SpecMismatchError,
    TruncatedCheckpointError,
    UnknownParameterError,
    VersionMismatchError,
)
from .model import ModelParams, ModelSpec, build
from .tensor import BatchNormState, Tensor

MAGIC = b"LKWSCKPT"
TRAILER = b"LKWE"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


@dataclass
class Checkpoint:
    model: ModelParams
    metadata: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)  # param name -> ndarray


def _records(ckpt: Checkpoint):
    mp = ckpt.model
    for name, t in mp.params.items():
        yield name, t.data
    for name, st in mp.state.items():
        yield f"{name}.running_mean", st.running_mean
        yield f"{name}.running_var", st.running_var
    for name in mp.params:
        if name in ckpt.velocity:
            yield f"optim.{name}", ckpt.velocity[name]


def to_bytes(ckpt: Checkpoint) -> bytes:
    recs = list(_records(ckpt))
    out = [MAGIC, struct.pack("<II", VERSION, len(recs))]
    for name, arr in recs:
        arr = np.asarray(arr)
        code = CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    meta = {
        "spec": ckpt.model.spec.to_dict(),
        "bn_updated": {k: s.updated for k, s in ckpt.model.state.items()},
        "metadata": ckpt.metadata,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    out.append(struct.pack("<I", len(blob)) + blob + TRAILER)
    return b"".join(out)


def save(ckpt, path):
    if isinstance(ckpt, ModelParams):
        ckpt = Checkpoint(ckpt)
    data = to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes, expected_spec: ModelSpec | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a lambdakws checkpoint (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    arrays = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"record {i} name length")
        name = r.take(n, f"record {i} name").decode()
        code, rank = r.unpack("<BB", f"record {name} header")
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I", f"record {name} extents")
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes, f"record {name} data"), dtype=dt).reshape(shape).copy()
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode())
    if r.take(len(TRAILER), "trailer") != TRAILER:
        raise CheckpointError("bad trailer")
    spec = ModelSpec.from_dict(meta["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatchError(f"checkpoint holds {spec}, expected {expected_spec}")
    mp = build(spec, seed=0)
    velocity = {}
    for name, arr in arrays.items():
        if name.startswith("optim."):
            pname = name[len("optim."):]
            if pname not in mp.params:
                raise UnknownParameterError(f"velocity for unknown parameter {pname!r}")
            velocity[pname] = arr
            continue
        base, _, buf = name.rpartition(".")
        if name in mp.params:
            if arr.shape != mp.params[name].shape:
                raise CheckpointError(f"{name}: shape {arr.shape}, spec expects {mp.params[name].shape}")
            mp.params[name] = Tensor(arr, requires_grad=True)
        elif buf in ("running_mean", "running_var") and base in mp.state:
            setattr(mp.state[base], buf, arr)
        else:
            raise UnknownParameterError(f"unknown parameter {name!r}")
    expected = {n for n, _ in _records(Checkpoint(mp))}
    missing = expected - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
    for k, flag in meta.get("bn_updated", {}).items():
        if k in mp.state:
            mp.state[k].updated = bool(flag)
    return Checkpoint(mp, meta.get("metadata", {}), velocity)


def load(path, expected_spec: ModelSpec | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), expected_spec)
