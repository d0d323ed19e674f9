"""Named parameter sets and the TVCK checkpoint format.

A :class:`ParamSet` is an ordered, immutable collection of dense float tensors,
each tagged with the layer it belongs to. Model weights are stored as float32;
task vectors keep float64 so that ``pre + (ft - pre)`` is exact.

TVCK layout (all integers little-endian)::

    b"TVCK" | u16 version | u32 entry_count
    entry_count x ( u16 name_len | name utf-8 | u16 layer_index | u8 dtype
                    | u8 ndim | ndim x u32 dim | payload )
    u32 meta_count
    meta_count x ( u16 key_len | key utf-8 | u32 value_len | value utf-8 )
    u32 crc32 of every preceding byte

dtype tags: 0 = float32, 1 = float64.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    InvalidArgument,
    NonFinite,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)

MAGIC = b"TVCK"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Entry:
    name: str
    layer_index: int
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class ParamSet:
    """Ordered named tensors with an explicit layer partition.

    Arrays are stored read-only; every operation returns a new ParamSet.
    """

    def __init__(self, entries: Iterable[tuple[str, int, np.ndarray] | Entry], meta: Mapping[str, str] | None = None):
        built = []
        seen = set()
        for item in entries:
            name, layer, data = (item.name, item.layer_index, item.data) if isinstance(item, Entry) else item
            if name in seen:
                raise InvalidArgument(f"duplicate parameter name {name!r}")
            seen.add(name)
            data = np.asarray(data)
            if data.dtype not in _TAG_OF:
                data = data.astype(np.float32)
            if any(d <= 0 for d in data.shape):
                raise InvalidArgument(f"{name!r}: dimensions must be positive, got {data.shape}")
            if not np.all(np.isfinite(data)):
                raise NonFinite(f"{name!r} contains NaN or Inf")
            layer = int(layer)
            if layer < 0:
                raise InvalidArgument(f"{name!r}: negative layer index")
            built.append(Entry(name, layer, _frozen(data)))
        if not built:
            raise InvalidArgument("a ParamSet needs at least one entry")
        layers = {e.layer_index for e in built}
        if layers != set(range(len(layers))):
            raise InvalidArgument(f"layer indices must be contiguous from 0, got {sorted(layers)}")
        self._entries: tuple[Entry, ...] = tuple(built)
        self._index = {e.name: i for i, e in enumerate(built)}
        self.meta: dict[str, str] = {str(k): str(v) for k, v in (meta or {}).items()}

    @property
    def entries(self) -> tuple[Entry, ...]:
        return self._entries

    @property
    def names(self) -> list[str]:
        return [e.name for e in self._entries]

    @property
    def layer_count(self) -> int:
        return max(e.layer_index for e in self._entries) + 1

    @property
    def num_params(self) -> int:
        return sum(e.data.size for e in self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Entry]:
        return iter(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[self._index[name]].data

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def layer_of(self, name: str) -> int:
        return self._entries[self._index[name]].layer_index

    def with_arrays(self, arrays: Sequence[np.ndarray], meta: Mapping[str, str] | None = None) -> "ParamSet":
        """Same names and layers, new data (in entry order)."""
        if len(arrays) != len(self._entries):
            raise ShapeMismatch(f"expected {len(self._entries)} arrays, got {len(arrays)}")
        for e, a in zip(self._entries, arrays):
            if np.shape(a) != e.shape:
                raise ShapeMismatch(f"{e.name}: shape {np.shape(a)} != {e.shape}")
        return ParamSet(
            [(e.name, e.layer_index, a) for e, a in zip(self._entries, arrays)],
            self.meta if meta is None else meta,
        )

    def astype(self, dtype) -> "ParamSet":
        return self.with_arrays([e.data.astype(dtype) for e in self._entries])

    def flat(self) -> np.ndarray:
        """All coordinates concatenated in entry order, as float64."""
        return np.concatenate([e.data.ravel().astype(np.float64) for e in self._entries])

    def unflatten(self, vector: np.ndarray, dtype=None, meta: Mapping[str, str] | None = None) -> "ParamSet":
        vector = np.asarray(vector)
        if vector.shape != (self.num_params,):
            raise ShapeMismatch(f"flat vector has shape {vector.shape}, expected ({self.num_params},)")
        arrays, start = [], 0
        for e in self._entries:
            chunk = vector[start:start + e.data.size].reshape(e.shape)
            arrays.append(chunk.astype(dtype or e.data.dtype))
            start += e.data.size
        return self.with_arrays(arrays, meta)

    def zeros_like(self, dtype=None) -> "ParamSet":
        return self.with_arrays([np.zeros(e.shape, dtype or e.data.dtype) for e in self._entries])

    def __eq__(self, other: object) -> bool:
        """Bit-exact equality of layout, dtypes, payloads and meta."""
        if not isinstance(other, ParamSet):
            return NotImplemented
        if self.meta != other.meta or len(self) != len(other):
            return False
        for a, b in zip(self._entries, other._entries):
            if (a.name, a.layer_index, a.shape, a.data.dtype) != (b.name, b.layer_index, b.shape, b.data.dtype):
                return False
            if a.data.tobytes() != b.data.tobytes():
                return False
        return True

    __hash__ = None

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} entries, {self.layer_count} layers, {self.num_params} params)"


def validate_aligned(sets: Sequence[ParamSet]) -> None:
    """Raise ShapeMismatch unless all sets share names, shapes, order and layers."""
    if not sets:
        raise InvalidArgument("validate_aligned needs at least one ParamSet")
    ref = sets[0]
    for i, other in enumerate(sets[1:], start=1):
        for a, b in zip(ref.entries, other.entries):
            if a.name != b.name:
                raise ShapeMismatch(f"set {i}: entry {a.name!r} vs {b.name!r}")
            if a.shape != b.shape:
                raise ShapeMismatch(f"set {i}: entry {a.name!r} has shape {b.shape}, expected {a.shape}")
            if a.layer_index != b.layer_index:
                raise ShapeMismatch(f"set {i}: entry {a.name!r} in layer {b.layer_index}, expected {a.layer_index}")
        if len(ref) != len(other):
            longer = ref if len(ref) > len(other) else other
            raise ShapeMismatch(f"set {i}: entry {longer.entries[min(len(ref), len(other))].name!r} missing on one side")


def elementwise_axpy(dst: ParamSet, scale: float, src: ParamSet) -> ParamSet:
    """Return ``dst + scale * src`` entry-wise, keeping ``dst``'s dtypes."""
    validate_aligned([dst, src])
    out = []
    for a, b in zip(dst.entries, src.entries):
        r = a.data.astype(np.float64) + float(scale) * b.data.astype(np.float64)
        if not np.all(np.isfinite(r)):
            raise NonFinite(f"{a.name}: axpy produced NaN or Inf")
        out.append(r.astype(a.data.dtype))
    return dst.with_arrays(out)


# -- serialization -----------------------------------------------------------

def dumps(p: ParamSet) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<HI", VERSION, len(p))
    for e in p.entries:
        name = e.name.encode("utf-8")
        if len(name) > 0xFFFF or e.layer_index > 0xFFFF or e.data.ndim > 0xFF:
            raise InvalidArgument(f"{e.name!r} does not fit the TVCK header fields")
        buf += struct.pack("<H", len(name)) + name
        buf += struct.pack("<HBB", e.layer_index, _TAG_OF[e.data.dtype], e.data.ndim)
        buf += struct.pack(f"<{e.data.ndim}I", *e.shape)
        buf += e.data.astype(DTYPE_TAGS[_TAG_OF[e.data.dtype]], copy=False).tobytes(order="C")
    buf += struct.pack("<I", len(p.meta))
    for k, v in p.meta.items():
        kb, vb = k.encode("utf-8"), v.encode("utf-8")
        buf += struct.pack("<H", len(kb)) + kb + struct.pack("<I", len(vb)) + vb
    buf += struct.pack("<I", zlib.crc32(buf) & 0xFFFFFFFF)
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"file ends inside {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _text(r: _Reader, n: int, what: str) -> str:
    start = r.pos
    raw = r.take(n, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ChecksumMismatch(f"{what} is not valid utf-8", start) from None


def loads(data: bytes) -> ParamSet:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {bytes(data[:4])!r}", 0)
    r.pos = 4
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} not supported", 4)
    (count,) = r.unpack("<I", "entry count")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = _text(r, nlen, "name")
        tag_pos = r.pos + 2
        layer, tag, ndim = r.unpack("<HBB", "entry header")
        if tag not in DTYPE_TAGS:
            raise UnsupportedVersion(f"unknown dtype tag {tag} for {name!r}", tag_pos)
        dims = r.unpack(f"<{ndim}I", "dims")
        dtype = DTYPE_TAGS[tag]
        n = math.prod(dims)  # exact, so corrupted dims cannot wrap around
        payload_pos = r.pos
        entries.append((name, layer, dtype, dims, r.take(n * dtype.itemsize, f"tensor {name!r}"), payload_pos))
    (mcount,) = r.unpack("<I", "meta count")
    meta = {}
    for _ in range(mcount):
        (klen,) = r.unpack("<H", "meta key length")
        key = _text(r, klen, "meta key")
        (vlen,) = r.unpack("<I", "meta value length")
        meta[key] = _text(r, vlen, "meta value")
    crc_pos = r.pos
    (stored,) = r.unpack("<I", "checksum")
    if r.pos != len(data):
        raise ChecksumMismatch(f"{len(data) - r.pos} unexpected trailing bytes", r.pos)
    actual = zlib.crc32(data[:crc_pos]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumMismatch(f"crc32 {actual:#010x} != stored {stored:#010x}", crc_pos)
    # arrays are built only once the checksum vouches for the headers
    built = []
    for name, layer, dtype, dims, raw, payload_pos in entries:
        if 0 in dims:
            raise InvalidArgument(f"{name!r}: zero-sized dimension {dims}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"{name!r} contains NaN or Inf at offset {payload_pos}")
        built.append((name, layer, arr))
    return ParamSet(built, meta)


def save_checkpoint(p: ParamSet, path: str | Path) -> None:
    Path(path).write_bytes(dumps(p))


def load_checkpoint(path: str | Path) -> ParamSet:
    return loads(Path(path).read_bytes())


def single_tensor(name: str, array: np.ndarray, meta: Mapping[str, str] | None = None) -> ParamSet:
    return ParamSet([(name, 0, array)], meta)
