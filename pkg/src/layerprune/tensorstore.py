"""Reading and writing tensor archives.

Layout (little-endian throughout)::

    [8 bytes]  unsigned header length N
    [N bytes]  UTF-8 JSON header: name -> {"dtype", "shape", "data_offsets"},
               plus an optional "__metadata__" map of str -> str
    [rest]     data buffer; offsets are relative to its start

This is the de facto open safetensors layout restricted to F32/F64, so real
checkpoints can be converted in with any safetensors writer.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

METADATA_KEY = "__metadata__"
_HEADER_ALIGN = 8


class CheckpointError(ValueError):
    """Raised for malformed archives or invalid checkpoint contents."""


class DType(enum.Enum):
    F32 = "F32"
    F64 = "F64"

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 8

    @property
    def numpy(self) -> np.dtype:
        return np.dtype("<f4") if self is DType.F32 else np.dtype("<f8")

    @classmethod
    def from_tag(cls, tag: str) -> "DType":
        try:
            return cls(tag)
        except ValueError:
            raise CheckpointError(f"unknown dtype tag {tag!r}") from None

    @classmethod
    def from_numpy(cls, dtype) -> "DType":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.F32
        if dtype == np.float64:
            return cls.F64
        raise CheckpointError(f"unsupported dtype {dtype}; only float32/float64 are stored")


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.itemsize


def _freeze(array: np.ndarray) -> np.ndarray:
    if array.flags.writeable:
        array = array.copy()
        array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Checkpoint:
    """Immutable named tensor collection plus free-form string metadata.

    Arrays are stored read-only. Zero-stride arrays (``np.broadcast_to``) are
    accepted, which lets shape-only fixtures stand in for very large models
    until they are serialized.
    """

    tensors: Mapping[str, np.ndarray]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for name, value in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise CheckpointError("tensor names must be non-empty strings")
            if name == METADATA_KEY:
                raise CheckpointError(f"{METADATA_KEY!r} is reserved")
            value = np.asarray(value)
            DType.from_numpy(value.dtype)
            frozen[name] = _freeze(value)
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise CheckpointError("metadata must map str to str")
        object.__setattr__(self, "tensors", frozen)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def meta(self) -> list[TensorMeta]:
        """Tensor metadata in serialization order (ascending name, packed)."""
        out = []
        offset = 0
        for name in self.names():
            arr = self.tensors[name]
            dtype = DType.from_numpy(arr.dtype)
            size = arr.size * dtype.itemsize
            out.append(TensorMeta(name, dtype, tuple(arr.shape), (offset, offset + size)))
            offset += size
        return out

    def replace(self, tensors=None, metadata=None) -> "Checkpoint":
        return Checkpoint(
            self.tensors if tensors is None else tensors,
            self.metadata if metadata is None else metadata,
        )

    def __eq__(self, other):
        """Bit-level equality of names, dtypes, shapes, buffers and metadata."""
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or self.tensors.keys() != other.tensors.keys():
            return False
        for name, a in self.tensors.items():
            b = other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape:
                return False
            if _le_bytes(a) != _le_bytes(b):
                return False
        return True

    __hash__ = None


def _le_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()


def get_tensor(c: Checkpoint, name: str) -> np.ndarray:
    """Return the named tensor as a read-only array."""
    try:
        return c.tensors[name]
    except KeyError:
        raise KeyError(f"tensor not found: {name!r}") from None


def write_checkpoint(c: Checkpoint) -> bytes:
    header = {}
    if c.metadata:
        header[METADATA_KEY] = dict(sorted(c.metadata.items()))
    for m in c.meta():
        header[m.name] = {
            "dtype": m.dtype.value,
            "shape": list(m.shape),
            "data_offsets": list(m.data_offsets),
        }
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    raw = text.encode("utf-8")
    raw += b" " * (-(8 + len(raw)) % _HEADER_ALIGN)
    parts = [struct.pack("<Q", len(raw)), raw]
    parts.extend(_le_bytes(c.tensors[name]) for name in c.names())
    return b"".join(parts)


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise CheckpointError(f"duplicate name in header: {key!r}")
        out[key] = value
    return out


def _parse_entry(name, entry) -> TensorMeta:
    if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
        raise CheckpointError(f"malformed header entry for {name!r}")
    dtype = DType.from_tag(entry["dtype"])
    shape, offsets = entry["shape"], entry["data_offsets"]
    if not isinstance(shape, list) or not all(
        isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
    ):
        raise CheckpointError(f"bad shape for {name!r}: {shape!r}")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
    ):
        raise CheckpointError(f"bad data_offsets for {name!r}: {offsets!r}")
    begin, end = offsets
    if not 0 <= begin <= end:
        raise CheckpointError(f"bad data_offsets for {name!r}: {offsets!r}")
    meta = TensorMeta(name, dtype, tuple(shape), (begin, end))
    if end - begin != meta.nbytes:
        raise CheckpointError(
            f"size mismatch for {name!r}: offsets span {end - begin} bytes, "
            f"shape {list(shape)} x {dtype.value} needs {meta.nbytes}"
        )
    return meta


def read_checkpoint(data: bytes) -> Checkpoint:
    data = memoryview(data)
    if len(data) < 8:
        raise CheckpointError("truncated header: file shorter than 8 bytes")
    (n,) = struct.unpack("<Q", data[:8])
    if n > len(data) - 8:
        raise CheckpointError(f"truncated header: declares {n} bytes, file has {len(data) - 8}")
    try:
        header = json.loads(bytes(data[8 : 8 + n]).decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise CheckpointError("__metadata__ must map str to str")

    buffer = data[8 + n :]
    metas = sorted((_parse_entry(k, v) for k, v in header.items()), key=lambda m: m.data_offsets)
    prev_end, prev_name = 0, None
    for m in metas:
        begin, end = m.data_offsets
        if end > len(buffer):
            raise CheckpointError(f"out-of-bounds offsets for {m.name!r}: {end} > {len(buffer)}")
        if begin < prev_end:
            raise CheckpointError(f"overlapping offsets: {prev_name!r} and {m.name!r}")
        if end > begin:
            prev_end, prev_name = end, m.name

    tensors = {}
    for m in metas:
        begin, end = m.data_offsets
        arr = np.frombuffer(buffer[begin:end], dtype=m.dtype.numpy).reshape(m.shape)
        tensors[m.name] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(tensors, metadata)


def load(path) -> Checkpoint:
    return read_checkpoint(Path(path).read_bytes())


def save(c: Checkpoint, path) -> None:
    Path(path).write_bytes(write_checkpoint(c))
