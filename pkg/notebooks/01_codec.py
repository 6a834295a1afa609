"""Walk through one super-block: fit, pack, decode, measure."""

import numpy as np

from kqf.kquant import (
    FORMATS,
    PRECISION_ORDER,
    dequantize_block,
    dequantize_tensor,
    fit_block_params,
    quantize_block,
    quantize_tensor,
    reconstruct,
)

rng = np.random.default_rng(0)
x = rng.standard_normal(256).astype(np.float32)

# the formats, cheapest first
for fid in PRECISION_ORDER:
    f = FORMATS[fid]
    print(f"{f.name:5s} block={f.block_len:3d} bytes={f.block_bytes:3d} bpw={f.bits_per_weight}")

# Q4_K: one fp16 scale and min per super-block, 6-bit scale/min per 32 values
p = fit_block_params(x, "q4_k")
print("d", float(p.d), "dmin", float(p.dmin))
print("sub-block scales", p.scales.tolist())
print("sub-block mins  ", p.mins.tolist())
print("first quants", p.quants[:16].tolist())

raw = quantize_block(x, "q4_k")
len(raw)  # 144
y = dequantize_block(raw, "q4_k")
assert np.array_equal(y, reconstruct(p))  # packing is lossless
print("q4_k rmse", float(np.sqrt(np.mean((y - x) ** 2))))

# the two encoders
for method in ("lsq", "ggml"):
    for name in ("q2_k", "q3_k", "q4_k", "q5_k", "q6_k"):
        y = dequantize_block(quantize_block(x, name, method), name)
        print(f"{method:4s} {name} rmse={np.sqrt(np.mean((y - x) ** 2)):.5f}")

# whole tensors: rows must be a multiple of the block length
w = rng.standard_normal((64, 512)).astype(np.float32)
qt = quantize_tensor(w, w.shape, "q3_k")
print(qt.format.name, qt.shape, len(qt.payload), "bytes")
err = dequantize_tensor(qt) - w
print("rel fro err", float(np.linalg.norm(err) / np.linalg.norm(w)))

# zeros stay zeros
z = quantize_tensor(np.zeros((2, 256)), (2, 256), "q2_k")
assert not dequantize_tensor(z).any()
