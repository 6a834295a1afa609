"""Block and tensor level encode/decode entry points."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ggml_ref, lsq
from .formats import BlockFormat, FormatId, get_format
from .packing import BlockParams, pack, reconstruct, unpack

METHODS = ("lsq", "ggml")
CHUNK_BLOCKS = 4096


class QuantError(ValueError):
    pass


class NonFiniteWeightError(QuantError):
    def __init__(self, index, role: str | None = None):
        self.index = index
        self.role = role
        where = f" in {role}" if role else ""
        super().__init__(f"non-finite weight at index {index}{where}")


class RowNotBlockAlignedError(QuantError):
    def __init__(self, fmt: BlockFormat, shape: tuple[int, ...], role: str | None = None):
        self.format = fmt
        self.shape = shape
        self.role = role
        super().__init__(
            f"row not block-aligned: {role or 'tensor'} shape {shape} has row length "
            f"{shape[-1] if shape else 0}, {fmt.name} needs a multiple of {fmt.block_len}"
        )


class BlockSizeError(QuantError):
    pass


def set_threads(n: int | None = None) -> int:
    """Set the worker count for the block search; ``None`` reads ``KQF_THREADS``."""
    import numba

    if n is None:
        env = os.environ.get("KQF_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def _check_finite(x: np.ndarray, role: str | None = None, shape=None) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        flat = int(np.flatnonzero(bad)[0])
        idx = np.unravel_index(flat, shape) if shape is not None else flat
        if isinstance(idx, tuple):
            idx = tuple(int(i) for i in idx)
        raise NonFiniteWeightError(idx, role)


def _fit(x2: np.ndarray, fmt: BlockFormat, method: str) -> BlockParams:
    if method == "lsq":
        return lsq.fit_blocks(x2, fmt)
    if method == "ggml":
        return ggml_ref.quantize_blocks(x2.astype(np.float32), fmt)
    raise ValueError(f"unknown quantization method {method!r}; expected one of {METHODS}")


def _block_values(values: Sequence[float], fmt: BlockFormat) -> np.ndarray:
    x = np.asarray(values, dtype=np.float32).reshape(-1)
    if x.size != fmt.block_len:
        raise BlockSizeError(f"{fmt.name} block needs {fmt.block_len} values, got {x.size}")
    _check_finite(x)
    return x


def fit_block_params(values: Sequence[float], fmt: str | BlockFormat, method: str = "lsq") -> BlockParams:
    fmt = get_format(fmt)
    if not fmt.is_quantized:
        raise ValueError(f"{fmt.name} has no block parameters")
    x = _block_values(values, fmt)
    return _fit(x[None, :], fmt, method).block(0)


def naive_block_params(values: Sequence[float], fmt: str | BlockFormat) -> BlockParams:
    """The max/min-initialized encoding that fitting must never do worse than."""
    fmt = get_format(fmt)
    x = _block_values(values, fmt)
    return lsq.naive_blocks(x[None, :], fmt).block(0)


def quantize_block(values: Sequence[float], fmt: str | BlockFormat, method: str = "lsq") -> bytes:
    fmt = get_format(fmt)
    return pack(fit_block_params(values, fmt, method)).tobytes()


def dequantize_block(data: bytes, fmt: str | BlockFormat) -> np.ndarray:
    fmt = get_format(fmt)
    if len(data) != fmt.block_bytes:
        raise BlockSizeError(f"{fmt.name} block is {fmt.block_bytes} bytes, got {len(data)}")
    return reconstruct(unpack(data, fmt))[0]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    format: BlockFormat
    shape: tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        n = int(np.prod(self.shape)) if self.shape else 0
        if n == 0:
            raise ValueError(f"invalid tensor shape {self.shape}")
        if n % self.format.block_len:
            raise RowNotBlockAlignedError(self.format, self.shape)
        expected = n // self.format.block_len * self.format.block_bytes
        if len(self.payload) != expected:
            raise BlockSizeError(
                f"{self.format.name} payload for shape {self.shape} must be {expected} bytes, "
                f"got {len(self.payload)}"
            )

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_blocks(self) -> int:
        return self.n_elements // self.format.block_len

    @property
    def nbytes(self) -> int:
        return len(self.payload)


def check_row_alignment(shape: tuple[int, ...], fmt: BlockFormat, role: str | None = None) -> None:
    if not shape or int(np.prod(shape)) == 0:
        raise ValueError(f"invalid tensor shape {shape}")
    if shape[-1] % fmt.block_len:
        raise RowNotBlockAlignedError(fmt, tuple(shape), role)


def quantize_tensor(
    values,
    shape: Sequence[int] | None = None,
    fmt: str | BlockFormat = "q8_0",
    method: str = "lsq",
    role: str | None = None,
) -> QuantizedTensor:
    """Quantize a row-major tensor block by block.

    Blocks never straddle rows: the last dimension must be a multiple of the
    format's block length. Output is independent of chunking and thread count.
    """
    fmt = get_format(fmt)
    arr = np.asarray(values)
    shape = tuple(int(s) for s in (arr.shape if shape is None else shape))
    check_row_alignment(shape, fmt, role)
    x = arr.astype(np.float32, copy=False).reshape(shape)
    _check_finite(x, role, shape)
    if fmt.id is FormatId.F32:
        return QuantizedTensor(fmt, shape, x.astype("<f4").tobytes())
    if fmt.id is FormatId.F16:
        h = x.astype("<f2")
        if not np.all(np.isfinite(h)):
            raise OverflowError(f"{role or 'tensor'} exceeds half-precision range")
        return QuantizedTensor(fmt, shape, h.tobytes())
    blocks = x.reshape(-1, fmt.block_len)
    parts = []
    for start in range(0, blocks.shape[0], CHUNK_BLOCKS):
        chunk = blocks[start : start + CHUNK_BLOCKS]
        parts.append(pack(_fit(chunk, fmt, method)).tobytes())
    return QuantizedTensor(fmt, shape, b"".join(parts))


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    fmt = qt.format
    if fmt.id is FormatId.F32:
        return np.frombuffer(qt.payload, dtype="<f4").astype(np.float32).reshape(qt.shape)
    if fmt.id is FormatId.F16:
        return np.frombuffer(qt.payload, dtype="<f2").astype(np.float32).reshape(qt.shape)
    return reconstruct(unpack(qt.payload, fmt)).reshape(qt.shape)


def decode_payload(payload, fmt: str | BlockFormat, shape: Sequence[int]) -> np.ndarray:
    """Decode a raw payload buffer (e.g. a container view) without copying it first."""
    fmt = get_format(fmt)
    if fmt.id is FormatId.F32:
        return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if fmt.id is FormatId.F16:
        return np.frombuffer(payload, dtype="<f2").astype(np.float32).reshape(shape)
    return reconstruct(unpack(np.frombuffer(payload, dtype=np.uint8), fmt)).reshape(shape)
