"""Binary ``FSEG`` checkpoints for tagged parameter sets.

Layout (all integers little-endian)::

    b"FSEG"  u16 format version  u32 entry count
    per entry:
        u16 name length, UTF-8 name
        u8 kind, u8 modality, u8 role          (tag bytes)
        u8 dtype code, u8 rank, u32 dims[rank]
        raw little-endian values
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..model import UNet
from ..nn import Kind, Modality, ParamSet, ParamTag, Role, SkeletonError

MAGIC = b"FSEG"
FORMAT_VERSION = 1

_KIND = {Kind.OTHER: 0, Kind.NORMALIZATION: 1}
_MODALITY = {Modality.SHARED: 0, Modality.CT: 1, Modality.MRI: 2}
_ROLE = {Role.PARAMETER: 0, Role.STATISTIC: 1}
_DTYPE = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_INV = {
    "kind": {v: k for k, v in _KIND.items()},
    "modality": {v: k for k, v in _MODALITY.items()},
    "role": {v: k for k, v in _ROLE.items()},
    "dtype": {v: k for k, v in _DTYPE.items()},
}


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


def encode(params: ParamSet) -> bytes:
    out = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(params))]
    for name, value, tag in params.items():
        if value.dtype not in _DTYPE:
            raise CheckpointError(f"{name}: unsupported dtype {value.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BBB", _KIND[tag.kind], _MODALITY[tag.modality], _ROLE[tag.role]))
        out.append(struct.pack("<BB", _DTYPE[value.dtype], value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_code(table: str, code: int, name: str):
    try:
        return _INV[table][code]
    except KeyError:
        raise CheckpointError(f"{name}: unknown {table} code {code}") from None


def decode(blob: bytes) -> ParamSet:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not an FSEG checkpoint (bad magic)")
    version, count = r.unpack("<HI", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = ParamSet()
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of entry {i}")
        try:
            name = r.take(n, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"entry {i}: name is not UTF-8") from None
        k, m, ro = r.unpack("<BBB", f"tag of {name}")
        try:
            tag = ParamTag(_decode_code("kind", k, name), _decode_code("modality", m, name),
                           _decode_code("role", ro, name))
        except ValueError as exc:
            raise CheckpointError(f"{name}: {exc}") from None
        code, rank = r.unpack("<BB", f"dtype of {name}")
        dtype = _decode_code("dtype", code, name)
        dims = r.unpack(f"<{rank}I", f"shape of {name}")
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        values = np.frombuffer(r.take(size, f"values of {name}"), dtype=dtype.newbyteorder("<"))
        try:
            params.add(name, values.astype(dtype).reshape(dims), tag)
        except KeyError as exc:
            raise CheckpointError(str(exc)) from None
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after the last entry")
    return params


def save_checkpoint(params: ParamSet, path: str | Path) -> Path:
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(params))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, architecture: "ParamSet | UNet | None" = None) -> ParamSet:
    """Read a checkpoint; with ``architecture`` the skeleton must match it exactly."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    params = decode(blob)
    if architecture is not None:
        ref = architecture.params if isinstance(architecture, UNet) else architecture
        try:
            ref.check_skeleton(params)
        except SkeletonError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
    return params


def load_into_model(model: UNet, path: str | Path) -> UNet:
    """Validate the whole file against ``model`` before touching any weight."""
    params = load_checkpoint(path, model)
    model.load_state(params)
    return model
