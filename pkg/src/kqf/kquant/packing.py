"""Bit-exact packing of block parameters into the k-quant byte layouts.

All functions operate on a leading block axis: ``quants`` has shape
``(n_blocks, block_len)`` and the packed result ``(n_blocks, block_bytes)``.
Multi-byte fields are little-endian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import BlockFormat, FormatId, get_format


@dataclass(frozen=True, eq=False)
class BlockParams:
    """Decoded parameters of one or more blocks.

    ``d`` and ``dmin`` are half-precision. ``scales`` and ``mins`` hold the
    per-sub-block integers and ``quants`` the per-element integers; for
    symmetric formats the quants are centered (e.g. ``[-4, 3]`` for Q3_K) and
    ``mins``/``dmin`` are zero. Fields carry an optional leading block axis.
    """

    format: BlockFormat
    d: np.ndarray
    dmin: np.ndarray
    scales: np.ndarray
    mins: np.ndarray
    quants: np.ndarray

    @property
    def n_blocks(self) -> int:
        return 1 if self.quants.ndim == 1 else self.quants.shape[0]

    def block(self, i: int) -> "BlockParams":
        if self.quants.ndim == 1:
            if i != 0:
                raise IndexError(i)
            return self
        return BlockParams(
            self.format,
            self.d[i],
            self.dmin[i],
            self.scales[i],
            self.mins[i],
            self.quants[i],
        )

    def batched(self) -> "BlockParams":
        if self.quants.ndim == 2:
            return self
        return BlockParams(
            self.format,
            np.atleast_1d(self.d),
            np.atleast_1d(self.dmin),
            self.scales[None],
            self.mins[None],
            self.quants[None],
        )

    def reconstruct(self) -> np.ndarray:
        """Float32 reconstruction, bit-identical to decoding the packed bytes."""
        return reconstruct(self)


def _f16_bytes(v: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(v, dtype="<f2").view(np.uint8).reshape(-1, 2)


def _f16_from(raw: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(raw).view("<f2").reshape(-1)


def _pack_2bit(L: np.ndarray) -> np.ndarray:
    # 128-element halves; byte l of a half holds elements l, l+32, l+64, l+96
    n = L.shape[0]
    Lr = L.reshape(n, 2, 4, 32).astype(np.uint8)
    qs = Lr[:, :, 0] | (Lr[:, :, 1] << 2) | (Lr[:, :, 2] << 4) | (Lr[:, :, 3] << 6)
    return qs.reshape(n, 64)


def _unpack_2bit(qs: np.ndarray) -> np.ndarray:
    n = qs.shape[0]
    q = qs.reshape(n, 2, 1, 32)
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8).reshape(1, 1, 4, 1)
    return ((q >> shifts) & 3).reshape(n, 256)


def _pack_scale_min_k4(sc: np.ndarray, m: np.ndarray) -> np.ndarray:
    sc = sc.astype(np.uint8)
    m = m.astype(np.uint8)
    out = np.zeros((sc.shape[0], 12), dtype=np.uint8)
    out[:, 0:4] = sc[:, 0:4] | ((sc[:, 4:8] >> 4) << 6)
    out[:, 4:8] = m[:, 0:4] | ((m[:, 4:8] >> 4) << 6)
    out[:, 8:12] = (sc[:, 4:8] & 0xF) | ((m[:, 4:8] & 0xF) << 4)
    return out


def _unpack_scale_min_k4(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sc = np.empty((s.shape[0], 8), dtype=np.uint8)
    m = np.empty_like(sc)
    sc[:, 0:4] = s[:, 0:4] & 63
    m[:, 0:4] = s[:, 4:8] & 63
    sc[:, 4:8] = (s[:, 8:12] & 0xF) | ((s[:, 0:4] >> 6) << 4)
    m[:, 4:8] = (s[:, 8:12] >> 4) | ((s[:, 4:8] >> 6) << 4)
    return sc, m


def _pack_q3_scales(sc: np.ndarray) -> np.ndarray:
    l = (sc + 32).astype(np.uint8)
    out = np.zeros((l.shape[0], 12), dtype=np.uint8)
    out[:, 0:8] = (l[:, 0:8] & 0xF) | ((l[:, 8:16] & 0xF) << 4)
    hi = (l >> 4).reshape(-1, 4, 4)  # [group j//4, j%4]
    out[:, 8:12] = hi[:, 0] | (hi[:, 1] << 2) | (hi[:, 2] << 4) | (hi[:, 3] << 6)
    return out


def _unpack_q3_scales(s: np.ndarray) -> np.ndarray:
    low = np.concatenate([s[:, 0:8] & 0xF, s[:, 0:8] >> 4], axis=1)
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8).reshape(1, 4, 1)
    hi = ((s[:, None, 8:12] >> shifts) & 3).reshape(-1, 16)
    return (low | (hi << 4)).astype(np.int16) - 32


def pack(params: BlockParams) -> np.ndarray:
    """Pack parameters into a ``(n_blocks, block_bytes)`` uint8 array."""
    p = params.batched()
    fmt = p.format
    n = p.quants.shape[0]
    q = np.asarray(p.quants)
    fid = fmt.id
    if fid is FormatId.Q8_0:
        return np.concatenate(
            [_f16_bytes(p.d), q.astype(np.int8).view(np.uint8).reshape(n, 32)], axis=1
        )
    if fid is FormatId.Q2_K:
        sc = (p.scales.astype(np.uint8) & 0xF) | (p.mins.astype(np.uint8) << 4)
        return np.concatenate(
            [sc, _pack_2bit(q), _f16_bytes(p.d), _f16_bytes(p.dmin)], axis=1
        )
    if fid is FormatId.Q3_K:
        L = (q + 4).astype(np.uint8)
        Lr = L.reshape(n, 8, 32)
        hmask = np.zeros((n, 32), dtype=np.uint8)
        for b in range(8):
            hmask |= ((Lr[:, b] >> 2) & 1) << b
        return np.concatenate(
            [hmask, _pack_2bit(L & 3), _pack_q3_scales(p.scales), _f16_bytes(p.d)],
            axis=1,
        )
    if fid is FormatId.Q4_K:
        L = q.astype(np.uint8).reshape(n, 4, 2, 32)
        qs = (L[:, :, 0] | (L[:, :, 1] << 4)).reshape(n, 128)
        return np.concatenate(
            [_f16_bytes(p.d), _f16_bytes(p.dmin), _pack_scale_min_k4(p.scales, p.mins), qs],
            axis=1,
        )
    if fid is FormatId.Q5_K:
        L = q.astype(np.uint8)
        Lr = L.reshape(n, 8, 32)
        qh = np.zeros((n, 32), dtype=np.uint8)
        for k in range(8):
            qh |= ((Lr[:, k] >> 4) & 1) << k
        lo = (L & 0xF).reshape(n, 4, 2, 32)
        qs = (lo[:, :, 0] | (lo[:, :, 1] << 4)).reshape(n, 128)
        return np.concatenate(
            [_f16_bytes(p.d), _f16_bytes(p.dmin), _pack_scale_min_k4(p.scales, p.mins), qh, qs],
            axis=1,
        )
    if fid is FormatId.Q6_K:
        L = (q + 32).astype(np.uint8).reshape(n, 2, 4, 32)
        lo = L & 0xF
        hi = L >> 4
        ql = np.concatenate(
            [lo[:, :, 0] | (lo[:, :, 2] << 4), lo[:, :, 1] | (lo[:, :, 3] << 4)], axis=2
        ).reshape(n, 128)
        qh = (hi[:, :, 0] | (hi[:, :, 1] << 2) | (hi[:, :, 2] << 4) | (hi[:, :, 3] << 6))
        sc = p.scales.astype(np.int8).view(np.uint8).reshape(n, 16)
        return np.concatenate([ql, qh.reshape(n, 64), sc, _f16_bytes(p.d)], axis=1)
    raise ValueError(f"format {fmt.name} has no block parameters")


def unpack(raw: np.ndarray | bytes, fmt: BlockFormat | str) -> BlockParams:
    """Inverse of :func:`pack`; ``raw`` is any buffer of whole blocks."""
    fmt = get_format(fmt)
    buf = np.frombuffer(raw, dtype=np.uint8) if isinstance(raw, (bytes, bytearray, memoryview)) else np.asarray(raw, dtype=np.uint8)
    if buf.size % fmt.block_bytes:
        raise ValueError(
            f"{fmt.name}: buffer of {buf.size} bytes is not a whole number of "
            f"{fmt.block_bytes}-byte blocks"
        )
    b = buf.reshape(-1, fmt.block_bytes)
    n = b.shape[0]
    nsub = fmt.n_sub_blocks
    zeros_sub = np.zeros((n, nsub), dtype=np.int16)
    zero_h = np.zeros(n, dtype=np.float16)
    fid = fmt.id
    if fid is FormatId.Q8_0:
        q = b[:, 2:34].copy().view(np.int8).astype(np.int16)
        return BlockParams(fmt, _f16_from(b[:, 0:2]), zero_h, np.ones((n, 1), np.int16), zeros_sub, q)
    if fid is FormatId.Q2_K:
        sc = b[:, 0:16]
        return BlockParams(
            fmt,
            _f16_from(b[:, 80:82]),
            _f16_from(b[:, 82:84]),
            (sc & 0xF).astype(np.int16),
            (sc >> 4).astype(np.int16),
            _unpack_2bit(b[:, 16:80]).astype(np.int16),
        )
    if fid is FormatId.Q3_K:
        hmask = b[:, 0:32]
        low = _unpack_2bit(b[:, 32:96])
        shifts = np.arange(8, dtype=np.uint8).reshape(1, 8, 1)
        high = ((hmask[:, None, :] >> shifts) & 1).reshape(n, 256)
        q = (low | (high << 2)).astype(np.int16) - 4
        return BlockParams(fmt, _f16_from(b[:, 108:110]), zero_h, _unpack_q3_scales(b[:, 96:108]), zeros_sub, q)
    if fid in (FormatId.Q4_K, FormatId.Q5_K):
        sc, m = _unpack_scale_min_k4(b[:, 4:16])
        if fid is FormatId.Q4_K:
            qs = b[:, 16:144].reshape(n, 4, 1, 32)
            hi = np.zeros((n, 256), dtype=np.uint8)
        else:
            qh = b[:, 16:48]
            qs = b[:, 48:176].reshape(n, 4, 1, 32)
            shifts = np.arange(8, dtype=np.uint8).reshape(1, 8, 1)
            hi = (((qh[:, None, :] >> shifts) & 1) << 4).reshape(n, 256)
        lo = np.concatenate([qs & 0xF, qs >> 4], axis=2).reshape(n, 256)
        return BlockParams(
            fmt,
            _f16_from(b[:, 0:2]),
            _f16_from(b[:, 2:4]),
            sc.astype(np.int16),
            m.astype(np.int16),
            (lo | hi).astype(np.int16),
        )
    if fid is FormatId.Q6_K:
        ql = b[:, 0:128].reshape(n, 2, 2, 32)
        qh = b[:, 128:192].reshape(n, 2, 1, 32)
        lo = np.stack(
            [ql[:, :, 0] & 0xF, ql[:, :, 1] & 0xF, ql[:, :, 0] >> 4, ql[:, :, 1] >> 4], axis=2
        )
        shifts = np.array([0, 2, 4, 6], dtype=np.uint8).reshape(1, 1, 4, 1)
        hi = (qh >> shifts) & 3
        q = (lo | (hi << 4)).reshape(n, 256).astype(np.int16) - 32
        sc = b[:, 192:208].copy().view(np.int8).astype(np.int16)
        return BlockParams(fmt, _f16_from(b[:, 208:210]), zero_h, sc, zeros_sub, q)
    raise ValueError(f"format {fmt.name} has no block parameters")


def reconstruct(params: BlockParams) -> np.ndarray:
    """Apply the reconstruction rule in float32, matching the reference decoder.

    Evaluated as ``(d * scale) * q - (dmin * min)`` with every intermediate
    rounded to float32, which is the operation order of the reference
    dequantizers.
    """
    p = params.batched()
    fmt = p.format
    n = p.quants.shape[0]
    nsub = fmt.n_sub_blocks
    sub = fmt.block_len // nsub
    d = p.d.astype(np.float32)[:, None]
    dl = d * p.scales.astype(np.float32)  # (n, nsub)
    q = p.quants.astype(np.float32).reshape(n, nsub, sub)
    y = dl[:, :, None] * q
    if fmt.asymmetric:
        ml = p.dmin.astype(np.float32)[:, None] * p.mins.astype(np.float32)
        y = y - ml[:, :, None]
    y = y.reshape(n, fmt.block_len)
    return y if params.quants.ndim == 2 else y[0]
