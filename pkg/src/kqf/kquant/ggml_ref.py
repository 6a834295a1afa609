"""Port of the llama.cpp reference k-quant encoders (``quantize_row_*_ref``).

Produces byte-identical blocks to the C reference built without FMA
contraction. Every arithmetic step is carried out on float32 arrays in the
same order as the C code, so each intermediate rounds exactly as it does
there. Loops run over the elements of a sub-block while the sub-blocks
themselves are processed as parallel lanes.
"""

from __future__ import annotations

import numpy as np

from .formats import BlockFormat, FormatId
from .packing import BlockParams

f32 = np.float32
GROUP_MAX_EPS = f32(1e-15)


def _nearest_int(v: np.ndarray) -> np.ndarray:
    # magic-number rounding of the C code, including its behaviour out of range
    val = (np.asarray(v, dtype=f32) + f32(12582912.0)).view(np.int32)
    return (val & 0x007FFFFF) - 0x00400000


def _roundf(v: np.ndarray) -> np.ndarray:
    # C roundf: halves away from zero
    t = np.trunc(v)
    frac = np.abs(v - t)
    return (t + np.where(frac >= f32(0.5), np.sign(v), f32(0))).astype(np.int32)


def _signed_absmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First element of largest magnitude per lane (strict ``>`` scan)."""
    m = x.shape[0]
    amax = np.zeros(m, dtype=f32)
    mx = np.zeros(m, dtype=f32)
    for i in range(x.shape[1]):
        ax = np.abs(x[:, i])
        upd = ax > amax
        amax = np.where(upd, ax, amax)
        mx = np.where(upd, x[:, i], mx)
    return mx, amax


def make_qkx2_quants(x, weights, nmax, rmin, rdelta, nstep, use_mad):
    m, n = x.shape
    rmin, rdelta, fnmax = f32(rmin), f32(rdelta), f32(nmax)
    mn = x[:, 0].copy()
    mx = x[:, 0].copy()
    sum_w = weights[:, 0].copy()
    sum_x = sum_w * x[:, 0]
    for i in range(1, n):
        mn = np.where(x[:, i] < mn, x[:, i], mn)
        mx = np.where(x[:, i] > mx, x[:, i], mx)
        sum_w = sum_w + weights[:, i]
        sum_x = sum_x + weights[:, i] * x[:, i]
    mn = np.where(mn > 0, f32(0), mn)
    flat = mx == mn
    iscale = fnmax / (mx - mn)
    scale = f32(1) / iscale
    xm = x - mn[:, None]
    L = np.clip(_nearest_int(iscale[:, None] * xm), 0, nmax)
    Lf = L.astype(f32)
    best = np.zeros(m, dtype=f32)
    for i in range(n):
        diff = scale * Lf[:, i] + mn - x[:, i]
        diff = np.abs(diff) if use_mad else diff * diff
        best = best + weights[:, i] * diff
    for step in range(nstep + 1):
        # the min adopted by an accepted step feeds the later steps
        iscale = (rmin + rdelta * f32(step) + fnmax) / (mx - mn)
        laux = np.clip(_nearest_int(iscale[:, None] * (x - mn[:, None])), 0, nmax)
        la = laux.astype(f32)
        sum_l = np.zeros(m, dtype=f32)
        sum_l2 = np.zeros(m, dtype=f32)
        sum_xl = np.zeros(m, dtype=f32)
        for i in range(n):
            wl = weights[:, i] * la[:, i]
            sum_l = sum_l + wl
            sum_l2 = sum_l2 + wl * la[:, i]
            sum_xl = sum_xl + wl * x[:, i]
        D = sum_w * sum_l2 - sum_l * sum_l
        ok = D > 0
        this_scale = (sum_w * sum_xl - sum_x * sum_l) / D
        this_min = (sum_l2 * sum_x - sum_l * sum_xl) / D
        pos = this_min > 0
        this_min = np.where(pos, f32(0), this_min)
        this_scale = np.where(pos, sum_xl / sum_l2, this_scale)
        cur = np.zeros(m, dtype=f32)
        for i in range(n):
            diff = this_scale * la[:, i] + this_min - x[:, i]
            diff = np.abs(diff) if use_mad else diff * diff
            cur = cur + weights[:, i] * diff
        take = ok & (cur < best) & ~flat
        L = np.where(take[:, None], laux, L)
        best = np.where(take, cur, best)
        scale = np.where(take, this_scale, scale)
        mn = np.where(take, this_min, mn)
    L = np.where(flat[:, None], 0, L)
    scale = np.where(flat, f32(0), scale)
    return scale.astype(f32), (-mn).astype(f32), L


def make_qx_quants(x, nmax):
    """``rmse_type == 1`` variant (weights ``x*x``), as used by Q6_K."""
    m, n = x.shape
    mx, amax = _signed_absmax(x)
    zero = amax < GROUP_MAX_EPS
    w = x * x
    iscale = f32(-nmax) / mx

    def trial(iscale):
        l = np.clip(_nearest_int(iscale[:, None] * x), -nmax, nmax - 1)
        lf = l.astype(f32)
        sumlx = np.zeros(m, dtype=f32)
        suml2 = np.zeros(m, dtype=f32)
        for i in range(n):
            sumlx = sumlx + w[:, i] * x[:, i] * lf[:, i]
            suml2 = suml2 + w[:, i] * lf[:, i] * lf[:, i]
        return l, sumlx, suml2

    L, sumlx, suml2 = trial(iscale)
    scale = np.where(suml2 != 0, sumlx / suml2, f32(0))
    best = scale * sumlx
    for k in range(-9, 10):
        if k == 0:
            continue
        iscale = -(f32(nmax) + f32(0.1) * f32(k)) / mx
        l, sumlx, suml2 = trial(iscale)
        take = (suml2 > 0) & (sumlx * sumlx > best * suml2)
        L = np.where(take[:, None], l, L)
        scale = np.where(take, sumlx / suml2, scale)
        best = np.where(take, scale * sumlx, best)
    L = np.where(zero[:, None], -nmax, L)
    scale = np.where(zero, f32(0), scale)
    return scale.astype(f32), L + nmax


def make_q3_quants(x, nmax):
    """``do_rmse`` variant used by Q3_K; returns offset quants ``L + nmax``."""
    m, n = x.shape
    mx, amax = _signed_absmax(x)
    zero = amax < GROUP_MAX_EPS
    iscale = f32(-nmax) / mx
    w = x * x
    L = np.clip(_nearest_int(iscale[:, None] * x), -nmax, nmax - 1)
    Lf = L.astype(f32)
    sumlx = np.zeros(m, dtype=f32)
    suml2 = np.zeros(m, dtype=f32)
    for i in range(n):
        sumlx = sumlx + w[:, i] * x[:, i] * Lf[:, i]
        suml2 = suml2 + w[:, i] * Lf[:, i] * Lf[:, i]
    # A pass without any accepted change leaves the state untouched, so
    # running all five passes matches the early exit of the C loop.
    for _ in range(5):
        for i in range(n):
            wi, xi = w[:, i], x[:, i]
            li = Lf[:, i]
            slx = sumlx - wi * xi * li
            sl2 = suml2 - wi * li * li
            new_l = np.clip(_nearest_int(xi * sl2 / slx), -nmax, nmax - 1)
            nl = new_l.astype(f32)
            slx2 = slx + wi * xi * nl
            sl22 = sl2 + wi * nl * nl
            take = (
                (slx > 0)
                & (new_l != L[:, i])
                & (sl22 > 0)
                & (slx2 * slx2 * suml2 > sumlx * sumlx * sl22)
            )
            L[:, i] = np.where(take, new_l, L[:, i])
            Lf[:, i] = L[:, i].astype(f32)
            sumlx = np.where(take, slx2, sumlx)
            suml2 = np.where(take, sl22, suml2)
    scale = np.where(suml2 > 0, sumlx / suml2, f32(0))
    # all-zero sub-blocks keep raw zeros (no offset)
    L = np.where(zero[:, None], 0, L + nmax)
    scale = np.where(zero, f32(0), scale)
    return scale.astype(f32), L


def _f16(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=f32).astype(np.float16)


def _asym_kquant(x, fmt: BlockFormat, nmax, scale_max, rmin, nstep, weights_fn, use_mad):
    nb = x.shape[0]
    nsub = fmt.n_sub_blocks
    sub = fmt.sub_block_len
    xs = x.reshape(nb * nsub, sub)
    w = weights_fn(xs)
    scales, mins, L = make_qkx2_quants(xs, w, nmax, rmin, 0.1, nstep, use_mad)
    scales = scales.reshape(nb, nsub)
    mins = mins.reshape(nb, nsub)
    L = L.reshape(nb, nsub, sub)
    # running max starting from 0 (strict >), i.e. max(0, ...)
    max_scale = np.maximum(scales.max(axis=1), f32(0))
    max_min = np.maximum(mins.max(axis=1), f32(0))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_scale = np.where(max_scale > 0, f32(scale_max) / max_scale, f32(0))
        inv_min = np.where(max_min > 0, f32(scale_max) / max_min, f32(0))
    ls = _nearest_int(inv_scale[:, None] * scales)
    lm = _nearest_int(inv_min[:, None] * mins)
    if scale_max == 63:
        # uint8 conversion before MIN(63, .)
        ls = np.minimum(63, ls & 0xFF)
        lm = np.minimum(63, lm & 0xFF)
        d = _f16(max_scale / f32(63))
        dmin = _f16(max_min / f32(63))
    else:
        # Q2_K stores the raw nearest_int into 4-bit fields
        ls = ls & 0xF
        lm = lm & 0xF
        d = np.where(max_scale > 0, _f16(max_scale / f32(15)), np.float16(0))
        dmin = np.where(max_min > 0, _f16(max_min / f32(15)), np.float16(0))
    dl = d.astype(f32)[:, None] * ls.astype(f32)
    ml = dmin.astype(f32)[:, None] * lm.astype(f32)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.clip(_nearest_int((x.reshape(nb, nsub, sub) + ml[:, :, None]) / dl[:, :, None]), 0, nmax)
    keep = dl == 0
    L = np.where(keep[:, :, None], L, q)
    return BlockParams(fmt, d, dmin, ls.astype(np.int16), lm.astype(np.int16), L.reshape(nb, -1).astype(np.int16))


def _weights_q4(xs):
    m, n = xs.shape
    sum_x2 = np.zeros(m, dtype=f32)
    for i in range(n):
        sum_x2 = sum_x2 + xs[:, i] * xs[:, i]
    av_x = np.sqrt(sum_x2 / f32(n))
    return av_x[:, None] + np.abs(xs)


def _q3_k(x, fmt):
    nb = x.shape[0]
    xs = x.reshape(nb * 16, 16)
    scales, L = make_q3_quants(xs, 4)
    scales = scales.reshape(nb, 16)
    L = L.reshape(nb, 16, 16)
    mx, _ = _signed_absmax(scales)
    has = mx != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        iscale = f32(-32) / mx
        l = _nearest_int(iscale[:, None] * scales)
    # int8_t conversion of nearest_int before clamping
    l = ((l + 128) & 0xFF) - 128
    sc = np.where(has[:, None], np.clip(l, -32, 31), -32)
    with np.errstate(divide="ignore"):
        d = np.where(has, _f16(f32(1) / iscale), np.float16(0))
    dl = d.astype(f32)[:, None] * sc.astype(f32)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.clip(_nearest_int(x.reshape(nb, 16, 16) / dl[:, :, None]), -4, 3) + 4
    L = np.where((dl == 0)[:, :, None], L, q)
    zero_h = np.zeros(nb, dtype=np.float16)
    return BlockParams(fmt, d, zero_h, sc.astype(np.int16), np.zeros_like(sc, np.int16), L.reshape(nb, -1).astype(np.int16) - 4)


def _q6_k(x, fmt):
    nb = x.shape[0]
    xs = x.reshape(nb * 16, 16)
    scales, L = make_qx_quants(xs, 32)
    scales = scales.reshape(nb, 16)
    L = L.reshape(nb, 16, 16)
    mx, amax = _signed_absmax(scales)
    zero = amax < GROUP_MAX_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        iscale = f32(-128) / mx
        d = _f16(f32(1) / iscale)
        sc = np.minimum(127, _nearest_int(iscale[:, None] * scales))
    sc = ((sc + 128) & 0xFF) - 128
    dl = d.astype(f32)[:, None] * sc.astype(f32)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.clip(_nearest_int(x.reshape(nb, 16, 16) / dl[:, :, None]), -32, 31) + 32
    L = np.where((dl == 0)[:, :, None], L, q)
    # all-zero blocks are memset to zero
    d = np.where(zero, np.float16(0), d)
    sc = np.where(zero[:, None], 0, sc)
    L = np.where(zero[:, None, None], 0, L)
    zero_h = np.zeros(nb, dtype=np.float16)
    return BlockParams(fmt, d, zero_h, sc.astype(np.int16), np.zeros_like(sc, np.int16), L.reshape(nb, -1).astype(np.int16) - 32)


def _q8_0(x, fmt):
    amax = np.abs(x).max(axis=1)
    d = amax / f32(127)
    with np.errstate(divide="ignore"):
        inv = np.where(d != 0, f32(1) / d, f32(0))
    q = _roundf(x * inv[:, None])
    nb = x.shape[0]
    return BlockParams(
        fmt,
        _f16(d),
        np.zeros(nb, dtype=np.float16),
        np.ones((nb, 1), np.int16),
        np.zeros((nb, 1), np.int16),
        q.astype(np.int16),
    )


def quantize_blocks(x: np.ndarray, fmt: BlockFormat) -> BlockParams:
    """Encode ``(n_blocks, block_len)`` float32 values with the reference heuristic."""
    x = np.ascontiguousarray(x, dtype=f32)
    fid = fmt.id
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if fid is FormatId.Q2_K:
            return _asym_kquant(x, fmt, 3, 15, -0.5, 15, np.abs, True)
        if fid is FormatId.Q4_K:
            return _asym_kquant(x, fmt, 15, 63, -1.0, 20, _weights_q4, False)
        if fid is FormatId.Q5_K:
            return _asym_kquant(x, fmt, 31, 63, -0.5, 15, _weights_q4, False)
        if fid is FormatId.Q3_K:
            return _q3_k(x, fmt)
        if fid is FormatId.Q6_K:
            return _q6_k(x, fmt)
        if fid is FormatId.Q8_0:
            return _q8_0(x, fmt)
    raise ValueError(f"no reference encoder for {fmt.name}")
