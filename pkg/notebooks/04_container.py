"""Write a GGUF file, read it back, and look at the bytes."""

import struct
import tempfile
from pathlib import Path

import numpy as np

from kqf.container import ContainerFile, MetaValue, ValueType, describe, read_container, to_bytes, write_container
from kqf.kquant import QuantizedTensor, dequantize_tensor, quantize_tensor

c = ContainerFile()
c.set("general.architecture", "demo")
c.metadata["demo.layers"] = MetaValue(ValueType.UINT32, 2)
x = np.linspace(-1, 1, 2 * 256, dtype=np.float32).reshape(2, 256)
c.add_tensor("blk.0.w.weight", x.shape, "q4_k", quantize_tensor(x, x.shape, "q4_k").payload)
c.add_tensor("blk.0.norm.weight", (256,), "f32", np.ones(256, np.float32).tobytes())

raw = to_bytes(c)
magic, version, n_tensors, n_kv = struct.unpack_from("<4sIQQ", raw)
print(magic, version, n_tensors, n_kv, len(raw), "bytes")

path = Path(tempfile.mkdtemp()) / "demo.gguf"
write_container(c, path)
with read_container(path) as back:  # tensor data is memory-mapped
    d = describe(back)
    print(d["alignment"], [(t["name"], t["type"], t["shape"], t["offset"]) for t in d["tensors"]])
    t = back.tensor("blk.0.w.weight")
    y = dequantize_tensor(QuantizedTensor(t.format, t.shape, bytes(t.data)))
    print("max abs err", float(np.abs(y - x).max()))
    assert to_bytes(back) == raw  # byte-identical rewrite

# writing is canonical: same content, same bytes
write_container(c, path.with_name("again.gguf"))
path.with_name("again.gguf").read_bytes() == raw
