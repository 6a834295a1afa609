"""ctypes bridge to the reference ``ggml-quants.c`` codecs.

Build the shared library once from a llama.cpp checkout (any recent tag)::

    G=llama.cpp/ggml
    cat > stubs.c <<'EOF'
    #include <stdio.h>
    #include <stdlib.h>
    #include <stddef.h>
    void ggml_abort(const char*f,int l,const char*fmt,...){fprintf(stderr,"%s:%d\\n",f,l);abort();}
    size_t ggml_row_size(int t, long long n){abort();}
    const char* ggml_type_name(int t){return "?";}
    size_t ggml_type_size(int t){abort();}
    EOF
    gcc -O2 -fPIC -shared -std=gnu11 -I$G/include -I$G/src -DNDEBUG \\
        $G/src/ggml-quants.c stubs.c -o libggml_quants.so -lm

and point ``KQF_GGML_LIB`` at it. Built without ``-march=native`` so that the
compiler cannot contract multiply-adds into FMA instructions.
"""

from __future__ import annotations

import ctypes
import os

import numpy as np

from kqf.kquant.formats import BlockFormat, get_format

_NAMES = {
    "q2_k": "q2_K",
    "q3_k": "q3_K",
    "q4_k": "q4_K",
    "q5_k": "q5_K",
    "q6_k": "q6_K",
    "q8_0": "q8_0",
}

_lib = None


def load(path: str | None = None) -> ctypes.CDLL:
    global _lib
    if _lib is None:
        path = path or os.environ.get("KQF_GGML_LIB", "/tmp/ref/libq.so")
        _lib = ctypes.CDLL(path)
    return _lib


def _fn(kind: str, fmt: BlockFormat):
    lib = load()
    name = _NAMES[fmt.name]
    f = getattr(lib, f"quantize_row_{name}_ref" if kind == "q" else f"dequantize_row_{name}")
    f.restype = None
    f.argtypes = [ctypes.c_void_p, ctypes.c_void_p, ctypes.c_int64]
    return f


def quantize(values, fmt) -> bytes:
    fmt = get_format(fmt)
    x = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
    out = np.zeros(x.size // fmt.block_len * fmt.block_bytes, dtype=np.uint8)
    _fn("q", fmt)(x.ctypes.data, out.ctypes.data, x.size)
    return out.tobytes()


def dequantize(raw: bytes, fmt) -> np.ndarray:
    fmt = get_format(fmt)
    buf = np.frombuffer(raw, dtype=np.uint8).copy()
    n = buf.size // fmt.block_bytes * fmt.block_len
    out = np.zeros(n, dtype=np.float32)
    _fn("d", fmt)(buf.ctypes.data, out.ctypes.data, n)
    return out
