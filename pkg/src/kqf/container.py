"""GGUF v3 container reader/writer (the subset needed for weight tensors).

Layout, all little-endian::

    magic "GGUF" | u32 version | u64 n_tensors | u64 n_kv
    n_kv    x  (string key, u32 value_type, value)
    n_tensors x (string name, u32 n_dims, u64 dims[n_dims], u32 type, u64 offset)
    zero padding to ``alignment``
    tensor data, each tensor starting at data_start + offset (aligned)

Strings are ``u64 length`` followed by UTF-8 bytes. ``dims`` are stored
innermost first, i.e. reversed relative to the row-major ``shape`` used
everywhere else in this package.
"""

from __future__ import annotations

import enum
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from .kquant.formats import BlockFormat, FormatId, get_format

MAGIC = b"GGUF"
VERSION = 3
DEFAULT_ALIGNMENT = 32
ALIGNMENT_KEY = "general.alignment"
MAX_DIMS = 4


class GGUFError(ValueError):
    """Base class for container parse/validation failures."""


class BadMagicError(GGUFError):
    pass


class UnsupportedVersionError(GGUFError):
    pass


class TruncatedFileError(GGUFError):
    pass


class MisalignedOffsetError(GGUFError):
    pass


class UnsupportedTensorTypeError(GGUFError):
    def __init__(self, type_id: int, name: str | None = None):
        self.type_id = type_id
        where = f" for tensor {name!r}" if name else ""
        super().__init__(f"unsupported tensor type {type_id}{where}")


class CorruptContainerError(GGUFError):
    pass


class ValueType(enum.IntEnum):
    UINT8 = 0
    INT8 = 1
    UINT16 = 2
    INT16 = 3
    UINT32 = 4
    INT32 = 5
    FLOAT32 = 6
    BOOL = 7
    STRING = 8
    ARRAY = 9
    UINT64 = 10
    INT64 = 11
    FLOAT64 = 12


_SCALAR = {
    ValueType.UINT8: struct.Struct("<B"),
    ValueType.INT8: struct.Struct("<b"),
    ValueType.UINT16: struct.Struct("<H"),
    ValueType.INT16: struct.Struct("<h"),
    ValueType.UINT32: struct.Struct("<I"),
    ValueType.INT32: struct.Struct("<i"),
    ValueType.FLOAT32: struct.Struct("<f"),
    ValueType.BOOL: struct.Struct("<?"),
    ValueType.UINT64: struct.Struct("<Q"),
    ValueType.INT64: struct.Struct("<q"),
    ValueType.FLOAT64: struct.Struct("<d"),
}

_TYPE_CODES: dict[FormatId, int] = {
    FormatId.F32: 0,
    FormatId.F16: 1,
    FormatId.Q8_0: 8,
    FormatId.Q2_K: 10,
    FormatId.Q3_K: 11,
    FormatId.Q4_K: 12,
    FormatId.Q5_K: 13,
    FormatId.Q6_K: 14,
}
_CODE_FORMATS = {v: k for k, v in _TYPE_CODES.items()}


def format_type_codes() -> dict[FormatId, int]:
    """Supported formats and their container type ids."""
    return dict(_TYPE_CODES)


def type_code(fmt: str | FormatId | BlockFormat) -> int:
    return _TYPE_CODES[get_format(fmt).id]


def format_for_code(code: int, name: str | None = None) -> BlockFormat:
    try:
        return get_format(_CODE_FORMATS[code])
    except KeyError:
        raise UnsupportedTensorTypeError(code, name) from None


@dataclass(frozen=True)
class MetaValue:
    """A typed metadata value; ``item_type`` is set for arrays only."""

    type: ValueType
    value: Any
    item_type: ValueType | None = None

    @classmethod
    def infer(cls, value: Any) -> "MetaValue":
        if isinstance(value, MetaValue):
            return value
        if isinstance(value, bool):
            return cls(ValueType.BOOL, value)
        if isinstance(value, str):
            return cls(ValueType.STRING, value)
        if isinstance(value, int):
            if 0 <= value < 2**32:
                return cls(ValueType.UINT32, value)
            if -(2**31) <= value < 0:
                return cls(ValueType.INT32, value)
            return cls(ValueType.UINT64 if value >= 0 else ValueType.INT64, value)
        if isinstance(value, float):
            return cls(ValueType.FLOAT32, value)
        if isinstance(value, (list, tuple)):
            items = [cls.infer(v) for v in value]
            kinds = {i.type for i in items}
            if len(kinds) > 1:
                raise TypeError(f"mixed-type metadata array: {sorted(k.name for k in kinds)}")
            item_type = kinds.pop() if kinds else ValueType.UINT32
            return cls(ValueType.ARRAY, [i.value for i in items], item_type)
        raise TypeError(f"unsupported metadata value {value!r}")


@dataclass
class TensorEntry:
    """Directory entry; ``offset`` is relative to the start of the data region."""

    name: str
    shape: tuple[int, ...]
    format: BlockFormat
    offset: int = 0
    data: bytes | memoryview | None = field(default=None, repr=False)

    @property
    def n_elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def nbytes(self) -> int:
        return self.n_elements // self.format.block_len * self.format.block_bytes

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(reversed(self.shape))


@dataclass
class ContainerFile:
    metadata: dict[str, MetaValue] = field(default_factory=dict)
    tensors: list[TensorEntry] = field(default_factory=list)
    version: int = VERSION
    magic: bytes = MAGIC
    _source: Any = field(default=None, repr=False, compare=False)

    @property
    def alignment(self) -> int:
        mv = self.metadata.get(ALIGNMENT_KEY)
        return int(mv.value) if mv is not None else DEFAULT_ALIGNMENT

    def get(self, key: str, default: Any = None) -> Any:
        mv = self.metadata.get(key)
        return default if mv is None else mv.value

    def set(self, key: str, value: Any) -> None:
        self.metadata[key] = MetaValue.infer(value)

    def tensor(self, name: str) -> TensorEntry:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def add_tensor(self, name: str, shape, fmt, data: bytes) -> TensorEntry:
        entry = TensorEntry(name, tuple(int(s) for s in shape), get_format(fmt), 0, data)
        if len(data) != entry.nbytes:
            raise GGUFError(f"tensor {name!r}: {len(data)} bytes given, {entry.nbytes} expected")
        self.tensors.append(entry)
        return entry

    def close(self) -> None:
        src = self._source
        self._source = None
        for t in self.tensors:
            if isinstance(t.data, memoryview):
                t.data.release()
                t.data = None
        if isinstance(src, mmap.mmap):
            src.close()

    def __enter__(self) -> "ContainerFile":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


class _Cursor:
    def __init__(self, buf, size: int):
        self.buf = buf
        self.size = size
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if n < 0 or self.pos + n > self.size:
            raise TruncatedFileError(f"truncated file while reading {what} at byte {self.pos}")
        view = memoryview(self.buf)[self.pos : self.pos + n]
        self.pos += n
        return view

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))[0]

    def string(self, what: str) -> str:
        n = self.unpack(_SCALAR[ValueType.UINT64], what)
        raw = self.take(n, what)
        try:
            return bytes(raw).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptContainerError(f"invalid UTF-8 in {what}") from e

    def value(self, vtype: int, what: str) -> MetaValue:
        try:
            vt = ValueType(vtype)
        except ValueError:
            raise CorruptContainerError(f"unknown metadata value type {vtype} in {what}") from None
        if vt is ValueType.STRING:
            return MetaValue(vt, self.string(what))
        if vt is ValueType.ARRAY:
            it = self.unpack(_SCALAR[ValueType.UINT32], what)
            n = self.unpack(_SCALAR[ValueType.UINT64], what)
            try:
                item = ValueType(it)
            except ValueError:
                raise CorruptContainerError(f"unknown array item type {it} in {what}") from None
            if item is ValueType.ARRAY:
                raise CorruptContainerError(f"nested arrays are not supported ({what})")
            if item is not ValueType.STRING:
                st = _SCALAR[item]
                if n * st.size > self.size - self.pos:
                    raise TruncatedFileError(f"truncated array in {what}")
                raw = self.take(n * st.size, what)
                vals = [v[0] for v in st.iter_unpack(raw)] if n else []
            else:
                if n > self.size - self.pos:
                    raise TruncatedFileError(f"truncated array in {what}")
                vals = [self.string(what) for _ in range(n)]
            return MetaValue(vt, vals, item)
        return MetaValue(vt, self.unpack(_SCALAR[vt], what))


def parse_container(buf, size: int | None = None) -> ContainerFile:
    """Parse a container held in any buffer; tensor data are zero-copy views."""
    size = len(buf) if size is None else size
    cur = _Cursor(buf, size)
    if size < 4 or bytes(memoryview(buf)[:4]) != MAGIC:
        head = bytes(memoryview(buf)[: min(4, size)])
        raise BadMagicError(f"bad magic {head!r}, expected {MAGIC!r}")
    cur.pos = 4
    version = cur.unpack(_SCALAR[ValueType.UINT32], "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}, expected {VERSION}")
    n_tensors = cur.unpack(_SCALAR[ValueType.UINT64], "tensor count")
    n_kv = cur.unpack(_SCALAR[ValueType.UINT64], "metadata count")
    # every entry needs at least 8 bytes; reject absurd counts before looping
    if n_tensors * 8 > size or n_kv * 8 > size:
        raise TruncatedFileError("declared entry counts exceed file size")
    metadata: dict[str, MetaValue] = {}
    for _ in range(n_kv):
        key = cur.string("metadata key")
        vtype = cur.unpack(_SCALAR[ValueType.UINT32], f"type of {key!r}")
        metadata[key] = cur.value(vtype, key)
    c = ContainerFile(metadata=metadata, version=version)
    align = c.alignment
    if align <= 0 or align & (align - 1):
        raise CorruptContainerError(f"alignment {align} is not a power of two")
    entries = []
    for _ in range(n_tensors):
        name = cur.string("tensor name")
        nd = cur.unpack(_SCALAR[ValueType.UINT32], f"rank of {name!r}")
        if not 1 <= nd <= MAX_DIMS:
            raise CorruptContainerError(f"tensor {name!r} has unsupported rank {nd}")
        dims = [cur.unpack(_SCALAR[ValueType.UINT64], f"dims of {name!r}") for _ in range(nd)]
        code = cur.unpack(_SCALAR[ValueType.UINT32], f"type of {name!r}")
        fmt = format_for_code(code, name)
        offset = cur.unpack(_SCALAR[ValueType.UINT64], f"offset of {name!r}")
        shape = tuple(reversed(dims))
        if any(d == 0 for d in shape) or shape[-1] % fmt.block_len:
            raise CorruptContainerError(f"tensor {name!r} shape {shape} invalid for {fmt.name}")
        entries.append(TensorEntry(name, shape, fmt, offset))
    data_start = _align(cur.pos, align)
    if data_start > size:
        raise TruncatedFileError("file ends inside the header padding")
    prev_end = 0
    for e in entries:
        if e.offset % align:
            raise MisalignedOffsetError(f"tensor {e.name!r} offset {e.offset} not aligned to {align}")
        if e.offset < prev_end:
            raise CorruptContainerError(f"tensor {e.name!r} offset {e.offset} overlaps previous tensor")
        # payloads are padded to the alignment, the last one included
        if data_start + _align(e.offset + e.nbytes, align) > size:
            raise TruncatedFileError(f"truncated payload for tensor {e.name!r}")
        prev_end = e.offset + e.nbytes
    # views only once everything validated, so a failed parse pins nothing
    for e in entries:
        e.data = memoryview(buf)[data_start + e.offset : data_start + e.offset + e.nbytes]
    c.tensors = entries
    c._source = buf
    return c


def read_container(path: str | os.PathLike) -> ContainerFile:
    """Memory-map and parse a container. Close it (or use ``with``) when done."""
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        if size == 0:
            raise TruncatedFileError(f"{path}: empty file")
        mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
    try:
        return parse_container(mm, size)
    except Exception:
        mm.close()
        raise


def _write_string(out: list, s: str) -> None:
    raw = s.encode("utf-8")
    out.append(struct.pack("<Q", len(raw)))
    out.append(raw)


def _write_value(out: list, mv: MetaValue) -> None:
    if mv.type is ValueType.STRING:
        _write_string(out, mv.value)
    elif mv.type is ValueType.ARRAY:
        out.append(struct.pack("<IQ", int(mv.item_type), len(mv.value)))
        for v in mv.value:
            _write_value(out, MetaValue(mv.item_type, v))
    else:
        out.append(_SCALAR[mv.type].pack(mv.value))


def header_bytes(c: ContainerFile) -> tuple[bytes, list[int]]:
    """Canonical header (padded to alignment) and the tensor data offsets."""
    align = c.alignment
    out: list[bytes] = [MAGIC, struct.pack("<IQQ", c.version, len(c.tensors), len(c.metadata))]
    for key, mv in c.metadata.items():
        _write_string(out, key)
        out.append(struct.pack("<I", int(mv.type)))
        _write_value(out, mv)
    offsets = []
    off = 0
    for t in c.tensors:
        offsets.append(off)
        _write_string(out, t.name)
        out.append(struct.pack("<I", len(t.shape)))
        out.append(struct.pack(f"<{len(t.shape)}Q", *t.dims))
        out.append(struct.pack("<IQ", type_code(t.format), off))
        off = _align(off + t.nbytes, align)
    head = b"".join(out)
    return head + b"\0" * (_align(len(head), align) - len(head)), offsets


def iter_bytes(c: ContainerFile) -> Iterator[bytes]:
    head, _ = header_bytes(c)
    yield head
    align = c.alignment
    for t in c.tensors:
        if t.data is None or len(t.data) != t.nbytes:
            raise GGUFError(f"tensor {t.name!r} has no payload of {t.nbytes} bytes")
        yield bytes(t.data)
        pad = _align(t.nbytes, align) - t.nbytes
        if pad:
            yield b"\0" * pad


def write_container(c: ContainerFile, path: str | os.PathLike) -> None:
    """Write canonically; the target only appears once fully written."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in iter_bytes(c):
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def to_bytes(c: ContainerFile) -> bytes:
    return b"".join(iter_bytes(c))


def describe(c: ContainerFile) -> dict:
    """Plain-data summary of the directory and metadata (as used by ``inspect``)."""
    meta = {}
    for k, mv in c.metadata.items():
        if mv.type is ValueType.ARRAY:
            meta[k] = {"type": f"ARRAY[{mv.item_type.name}]", "count": len(mv.value)}
            if len(mv.value) <= 16:
                meta[k]["value"] = list(mv.value)
        else:
            meta[k] = {"type": mv.type.name, "value": mv.value}
    return {
        "version": c.version,
        "alignment": c.alignment,
        "metadata": meta,
        "tensors": [
            {
                "name": t.name,
                "shape": list(t.shape),
                "type": t.format.name,
                "type_id": type_code(t.format),
                "offset": t.offset,
                "nbytes": t.nbytes,
            }
            for t in c.tensors
        ],
    }

