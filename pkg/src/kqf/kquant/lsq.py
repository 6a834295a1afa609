"""Least-squares block fitting with a bounded candidate-scale grid.

Each sub-block starts from the naive max/min scale (``range / levels``) and
searches 15 multiples of it in ``[0.8, 1.2]``; asymmetric formats search the
sub-block minimum on the same relative grid. The winning sub-block scales are
then quantized against a half-precision super-block scale, the super-block
``(d, dmin)`` pair gets one joint least-squares refit, and the encoding with
the lowest decoded squared error among {refit, grid, naive} is kept. Blocks
of very small magnitude also try a narrower integer range that keeps the
super-block scales out of the subnormal half-precision range.

All objectives are uniform squared error.
"""

from __future__ import annotations

import os
import sys

import numba
import numpy as np

from .formats import BlockFormat, FormatId
from .packing import BlockParams, reconstruct, unpack

# OpenMP is thread-safe for concurrent callers; workqueue is not.
if sys.platform.startswith("linux") and "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

GRID_STEPS = 15
GRID = np.linspace(0.8, 1.2, GRID_STEPS)


# The candidate loop is innermost with one accumulator per candidate: each
# accumulator still sums over elements in order (results are unchanged) but
# the loop vectorizes.


@numba.njit(cache=True, parallel=True)
def _grid_asym(x, s0, lo0, grid, nmax):  # pragma: no cover - compiled
    m, n = x.shape
    g = grid.size
    best_s = np.empty(m)
    best_lo = np.empty(m)
    for r in numba.prange(m):
        if s0[r] == 0.0:
            best_s[r] = 0.0
            best_lo[r] = lo0[r]
            continue
        ss = np.empty(g * g)
        ls = np.empty(g * g)
        for a in range(g):
            for b in range(g):
                ss[a * g + b] = s0[r] * grid[a]
                ls[a * g + b] = lo0[r] * grid[b]
        err = np.zeros(g * g)
        for i in range(n):
            xi = x[r, i]
            for c in range(g * g):
                q = np.rint((xi - ls[c]) / ss[c])
                q = min(max(q, 0.0), nmax)
                diff = ss[c] * q + ls[c] - xi
                err[c] += diff * diff
        k = 0
        for c in range(1, g * g):
            if err[c] < err[k]:
                k = c
        best_s[r] = ss[k]
        best_lo[r] = ls[k]
    return best_s, best_lo


@numba.njit(cache=True, parallel=True)
def _grid_sym(x, s0, grid, qmin, qmax):  # pragma: no cover - compiled
    m, n = x.shape
    g = grid.size
    best_s = np.empty(m)
    for r in numba.prange(m):
        if s0[r] == 0.0:
            best_s[r] = 0.0
            continue
        ss = np.empty(g)
        for a in range(g):
            ss[a] = s0[r] * grid[a]
        err = np.zeros(g)
        for i in range(n):
            xi = x[r, i]
            for a in range(g):
                q = np.rint(xi / ss[a])
                q = min(max(q, qmin), qmax)
                diff = ss[a] * q - xi
                err[a] += diff * diff
        k = 0
        for a in range(1, g):
            if err[a] < err[k]:
                k = a
        best_s[r] = ss[k]
    return best_s


def _signed_absmax(x: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(x), axis=-1)
    return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]


def _f16(v: np.ndarray) -> np.ndarray:
    out = np.asarray(v, dtype=np.float64).astype(np.float16)
    if not np.all(np.isfinite(out)):
        raise OverflowError("block scale exceeds half-precision range")
    return out


def initial_scales(x: np.ndarray, fmt: BlockFormat) -> tuple[np.ndarray, np.ndarray]:
    """Naive per-sub-block ``(scale, min)`` from the value range.

    ``x`` is ``(n_blocks, n_sub, sub_len)``. Asymmetric formats use
    ``(max - min(min, 0)) / levels``; symmetric formats map the value of
    largest magnitude onto the most negative quant.
    """
    if fmt.asymmetric:
        lo = np.minimum(x.min(axis=-1), 0.0)
        hi = x.max(axis=-1)
        return (hi - lo) / fmt.levels, lo
    return _signed_absmax(x) / fmt.quant_min, np.zeros(x.shape[:-1])


def _zero_code(fmt: BlockFormat) -> BlockParams:
    return unpack(np.zeros(fmt.block_bytes, dtype=np.uint8), fmt)


F16_MIN_NORMAL = 2.0**-14


def _int_range(ref: np.ndarray, lim: int, normal: bool) -> np.ndarray:
    """Largest integer magnitude per block; with ``normal`` it is shrunk so
    ``ref / n`` stays a normal half-precision value where possible."""
    if not normal:
        return np.full(ref.shape, float(lim))
    n = np.floor(np.abs(ref) / F16_MIN_NORMAL)
    return np.clip(n, 1, abs(lim)) * np.sign(lim)


def _encode(x: np.ndarray, fmt: BlockFormat, s: np.ndarray, lo: np.ndarray, normal: bool = False) -> BlockParams:
    """Integerize sub-block scales/mins and requantize against them."""
    nb = x.shape[0]
    zero = _zero_code(fmt)
    if fmt.id is FormatId.Q8_0:
        d = _f16(s[:, 0])
        ints = np.ones((nb, 1), dtype=np.int64)
    else:
        ref = _signed_absmax(s) if not fmt.asymmetric else s.max(axis=1)
        lim = fmt.scale_max if fmt.asymmetric else fmt.scale_min
        d = _f16(ref / _int_range(ref, lim, normal))
        d64 = d.astype(np.float64)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ints = np.where(d64 != 0, np.rint(s / d64), 0.0)
        ints = np.clip(ints, fmt.scale_min, fmt.scale_max).astype(np.int64)
    if fmt.asymmetric:
        offs = -lo
        oref = offs.max(axis=1)
        dmin = _f16(oref / _int_range(oref, fmt.scale_max, normal))
        dm64 = dmin.astype(np.float64)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            mints = np.where(dm64 != 0, np.rint(offs / dm64), 0.0)
        mints = np.clip(mints, 0, fmt.scale_max).astype(np.int64)
    else:
        dmin = np.zeros(nb, dtype=np.float16)
        mints = np.zeros_like(ints)
    q = _requantize(x, fmt, d, ints, dmin, mints)
    return BlockParams(fmt, d, dmin, ints.astype(np.int16), mints.astype(np.int16), q)


def _requantize(x, fmt, d, ints, dmin, mints) -> np.ndarray:
    nb, nsub, sub = x.shape
    eff = d.astype(np.float64)[:, None] * ints
    off = dmin.astype(np.float64)[:, None] * mints
    zq = _zero_code(fmt).quants[0, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.rint((x + off[:, :, None]) / eff[:, :, None])
    q = np.clip(np.nan_to_num(q), fmt.quant_min, fmt.quant_max)
    q = np.where((eff == 0)[:, :, None], zq, q)
    return q.reshape(nb, -1).astype(np.int16)


def _refit_super(x: np.ndarray, p: BlockParams) -> BlockParams:
    """Joint least-squares refit of ``(d, dmin)`` with integers held fixed."""
    fmt = p.format
    nb, nsub, sub = x.shape
    a = (p.scales.astype(np.float64)[:, :, None] * p.quants.reshape(nb, nsub, sub)).reshape(nb, -1)
    xf = x.reshape(nb, -1)
    saa = np.einsum("ij,ij->i", a, a)
    sax = np.einsum("ij,ij->i", a, xf)
    if fmt.asymmetric:
        b = np.repeat(p.mins.astype(np.float64), sub, axis=1)
        sbb = np.einsum("ij,ij->i", b, b)
        sab = np.einsum("ij,ij->i", a, b)
        sbx = np.einsum("ij,ij->i", b, xf)
        # minimize |d*a - dmin*b - x|^2
        det = saa * sbb - sab * sab
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(det > 0, (sax * sbb - sab * sbx) / det, np.where(saa > 0, sax / saa, 0.0))
            dmin = np.where(det > 0, (sax * sab - saa * sbx) / det, 0.0)
        dmin = np.where(det > 0, dmin, p.dmin.astype(np.float64))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(saa > 0, sax / saa, 0.0)
        dmin = np.zeros(nb)
    d = np.nan_to_num(d).astype(np.float16)
    dmin = np.nan_to_num(dmin).astype(np.float16)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(dmin))):
        return p
    ints = p.scales.astype(np.int64)
    mints = p.mins.astype(np.int64)
    q = _requantize(x, fmt, d, ints, dmin, mints)
    return BlockParams(fmt, d, dmin, p.scales, p.mins, q)


def block_sse(params: BlockParams, x: np.ndarray) -> np.ndarray:
    """Squared error of the decoded (float32) reconstruction per block."""
    y = reconstruct(params.batched()).astype(np.float64)
    diff = y - x.reshape(y.shape)
    return np.einsum("ij,ij->i", diff, diff)


def _pick(x2, cands: list[BlockParams]) -> BlockParams:
    errs = np.stack([block_sse(c, x2) for c in cands])
    best = np.argmin(errs, axis=0)  # first minimum wins ties
    fmt = cands[0].format

    def sel(field):
        arr = np.stack([getattr(c, field) for c in cands])
        return arr[best, np.arange(arr.shape[1])]

    return BlockParams(fmt, sel("d"), sel("dmin"), sel("scales"), sel("mins"), sel("quants"))


def _canonical_zero(p: BlockParams, x2: np.ndarray) -> BlockParams:
    """Blocks of zeros encode to all-zero bytes."""
    zero_rows = ~np.any(x2 != 0, axis=1)
    if not zero_rows.any():
        return p
    z = _zero_code(p.format)
    f = {k: getattr(p, k).copy() for k in ("d", "dmin", "scales", "mins", "quants")}
    for k in f:
        f[k][zero_rows] = getattr(z, k)[0]
    return BlockParams(p.format, **f)


def naive_blocks(x: np.ndarray, fmt: BlockFormat) -> BlockParams:
    """Max/min-initialized encoding with nearest rounding, no search."""
    x2 = np.asarray(x, dtype=np.float64)
    x3 = x2.reshape(x2.shape[0], fmt.n_sub_blocks, -1)
    s0, lo0 = initial_scales(x3, fmt)
    return _canonical_zero(_encode(x3, fmt, s0, lo0), x2)


def fit_blocks(x: np.ndarray, fmt: BlockFormat) -> BlockParams:
    """Fit ``(n_blocks, block_len)`` finite values; returns batched params."""
    x2 = np.asarray(x, dtype=np.float64)
    nb = x2.shape[0]
    nsub = fmt.n_sub_blocks
    x3 = x2.reshape(nb, nsub, -1)
    s0, lo0 = initial_scales(x3, fmt)
    flat = x3.reshape(nb * nsub, -1)
    if fmt.asymmetric:
        s, lo = _grid_asym(flat, s0.ravel(), lo0.ravel(), GRID, float(fmt.quant_max))
        s, lo = s.reshape(nb, nsub), lo.reshape(nb, nsub)
    else:
        s = _grid_sym(flat, s0.ravel(), GRID, float(fmt.quant_min), float(fmt.quant_max)).reshape(nb, nsub)
        lo = lo0
    grid = _encode(x3, fmt, s, lo)
    refit = _refit_super(x3, grid)
    naive = _encode(x3, fmt, s0, lo0)
    # Super-scales in the subnormal half-precision range lose precision, so
    # also try a coarser integer range that keeps them normal. For ordinary
    # blocks these equal the first two candidates and lose the tie.
    grid_n = _encode(x3, fmt, s, lo, normal=True)
    cands = [refit, grid, naive, _refit_super(x3, grid_n), grid_n]
    return _canonical_zero(_pick(x2, cands), x2)
