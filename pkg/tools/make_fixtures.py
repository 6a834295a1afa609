"""Regenerate tests/fixtures from the reference implementations.

Needs the ggml-quants shared library (see ggml_oracle.py) and the ``gguf``
Python package. Run from the repository root::

    KQF_GGML_LIB=/path/to/libggml_quants.so python tools/make_fixtures.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tools"))
sys.path.insert(0, str(ROOT / "src"))

import ggml_oracle  # noqa: E402

from kqf.kquant import codec  # noqa: E402

FIXTURES = ROOT / "tests" / "fixtures"
FORMATS = ["q2_k", "q3_k", "q4_k", "q5_k", "q6_k", "q8_0"]


def vectors() -> dict[str, np.ndarray]:
    out = {}
    for seed in (1, 2, 3):
        out[f"gauss-{seed}"] = np.random.default_rng(seed).standard_normal(256)
    x = np.random.default_rng(4).standard_normal(256)
    x[17] = 20.0
    x[200] = -11.0
    out["outlier-4"] = x
    out["small-5"] = np.random.default_rng(5).standard_normal(256) * 1e-3
    out["shifted-6"] = np.random.default_rng(6).standard_normal(256) * 0.1 + 0.5
    return {k: v.astype(np.float32) for k, v in out.items()}


def hexf(a: np.ndarray) -> str:
    return np.ascontiguousarray(a, dtype="<f4").tobytes().hex()


def codec_fixtures() -> dict:
    doc = {"vectors": {}, "cases": []}
    for name, x in vectors().items():
        doc["vectors"][name] = hexf(x)
        for fmt in FORMATS:
            ref = ggml_oracle.quantize(x, fmt)
            ours = codec.quantize_tensor(x, (1, 256), fmt, method="lsq").payload
            doc["cases"].append(
                {
                    "vector": name,
                    "format": fmt,
                    "ref_bytes": ref.hex(),
                    "ref_decoded": hexf(ggml_oracle.dequantize(ref, fmt)),
                    "lsq_bytes": ours.hex(),
                    "lsq_ref_decoded": hexf(ggml_oracle.dequantize(ours, fmt)),
                }
            )
    return doc


def container_fixture(path: Path) -> dict:
    """Tiny container written and inspected by the reference gguf package."""
    import gguf

    rng = np.random.default_rng(7)
    w = gguf.GGUFWriter(str(path), "toy")
    w.add_uint32("toy.block_count", 1)
    w.add_float32("toy.rope.freq_base", 10000.0)
    w.add_bool("toy.flag", True)
    w.add_string("general.name", "kqf fixture")
    w.add_array("toy.list", [1, 2, 3])
    w.add_tensor("norm.weight", rng.standard_normal(256).astype(np.float32))
    w.add_tensor("emb.weight", rng.standard_normal((2, 256)).astype(np.float16))
    for fmt, code in (("q8_0", gguf.GGMLQuantizationType.Q8_0), ("q4_k", gguf.GGMLQuantizationType.Q4_K),
                      ("q6_k", gguf.GGMLQuantizationType.Q6_K), ("q2_k", gguf.GGMLQuantizationType.Q2_K)):
        x = rng.standard_normal((2, 256)).astype(np.float32)
        raw = np.frombuffer(ggml_oracle.quantize(x, fmt), dtype=np.uint8).reshape(2, -1)
        w.add_tensor(f"{fmt}.weight", raw, raw_dtype=code)
    w.write_header_to_file()
    w.write_kv_data_to_file()
    w.write_tensors_to_file()
    w.close()

    r = gguf.GGUFReader(str(path))
    fields = {}
    for f in r.fields.values():
        if f.name.startswith("GGUF."):
            continue
        fields[f.name] = [int(t) for t in f.types]
    return {
        "alignment": r.alignment,
        "data_offset": r.data_offset,
        "fields": fields,
        "tensors": [
            {
                "name": t.name,
                "dims": [int(d) for d in t.shape],
                "type_id": int(t.tensor_type),
                "type": t.tensor_type.name,
                "n_elements": int(t.n_elements),
                "n_bytes": int(t.n_bytes),
                "data_offset": int(t.data_offset),
            }
            for t in r.tensors
        ],
    }


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    (FIXTURES / "codec_golden.json").write_text(json.dumps(codec_fixtures(), indent=1) + "\n")
    info = container_fixture(FIXTURES / "tiny_ref.gguf")
    (FIXTURES / "tiny_ref.inspect.json").write_text(json.dumps(info, indent=1) + "\n")
    print("fixtures written to", FIXTURES)


if __name__ == "__main__":
    main()
