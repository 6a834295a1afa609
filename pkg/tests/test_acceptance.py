"""Primary acceptance criteria, one test each, at their stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import hashlib
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from kqf.analysis import analyze
from kqf.cli import main
from kqf.container import to_bytes
from kqf.kquant import QuantizedTensor, dequantize_tensor, get_format, quantize_tensor
from kqf.quantize import quantize_model
from kqf.recipes import builtin_recipes, get_recipe, plan_allocation
from kqf.toy import make_toy_model, toy_arch

from conftest import CONFIGS, KFORMATS, f32_from_hex, golden, golden_vector

DEEPSEEK = str(CONFIGS / "deepseek-v3.json")

# Published resource table: avg bits, model size (GiB), MU per GPU (GB, 8 devices, 32K context).
TABLE = {
    "Q4_K_M": (4.82, 377, 71),
    "Q3_K_M": (3.81, 298, 61),
    "DQ3_K_M": (3.59, 281, 59),
    "Q2_K_L": (2.91, 228, 52),
    "UD-Q2_K_XL": (2.70, 212, 50),
}


def _estimate(capsys, *argv):
    assert main(["estimate", "--arch", DEEPSEEK, "--json", *argv]) == 0
    out, err = capsys.readouterr()
    assert err == ""
    return json.loads(out)


def test_published_size_table(capsys):
    for recipe, (bpw, gib, per_gpu) in TABLE.items():
        t0 = time.perf_counter()
        doc = _estimate(capsys, "--recipe", recipe, "--context", "32768", "--n-devices", "8")
        elapsed = time.perf_counter() - t0
        assert abs(doc["avg_bpw"] - bpw) <= 0.08, (recipe, doc["avg_bpw"])
        assert abs(doc["weight_gib"] - gib) <= 0.02 * gib, (recipe, doc["weight_gib"])
        assert doc["per_device_gib"] == per_gpu, (recipe, doc["per_device_gib"])
        assert elapsed < 1.0, (recipe, elapsed)


def test_device_fit_verdicts(capsys):
    verdicts = {}
    for recipe in ("DQ3_K_M", "Q4_K_M"):
        doc = _estimate(capsys, "--recipe", recipe, "--devices", "8x80GB,8x64GB")
        verdicts[recipe] = {v["device"]: v["verdict"] for v in doc["fits"]}
    assert verdicts["DQ3_K_M"] == {"8x80GB": "FITS", "8x64GB": "FITS"}
    assert verdicts["Q4_K_M"] == {"8x80GB": "FITS", "8x64GB": "EXCEEDS"}


def test_dq3_allocation_distribution(deepseek):
    assert deepseek.n_moe_layers == 58
    plan = plan_allocation(deepseek, get_recipe("DQ3_K_M"))
    downs = [a for a in plan if a.tensor.role == "ffn_down_exps"]
    assert plan.format_counts("ffn_down_exps") == {"q6_k": 2, "q4_k": 12, "q3_k": 44}
    first_moe = deepseek.n_dense_layers
    assert [a.tensor.layer for a in downs if a.format.name == "q6_k"] == [first_moe, first_moe + 1]


def test_codec_conformance():
    cases = golden()["cases"]
    per_format = {f: 0 for f in KFORMATS}
    for c in cases:
        fmt = get_format(c["format"])
        x = golden_vector(c["vector"])
        # reference encoder, bit for bit
        assert quantize_tensor(x, (1, 256), fmt, method="ggml").payload.hex() == c["ref_bytes"]
        # decoder, bit for bit, on reference and on our own encodings
        for raw, want in ((c["ref_bytes"], c["ref_decoded"]), (c["lsq_bytes"], c["lsq_ref_decoded"])):
            y = dequantize_tensor(QuantizedTensor(fmt, (256,), bytes.fromhex(raw)))
            assert y.tobytes() == f32_from_hex(want).tobytes()
        per_format[c["format"]] += 1
    assert all(n >= 3 for n in per_format.values()), per_format

    for name in KFORMATS:
        for method in ("lsq", "ggml"):
            qt = quantize_tensor(np.zeros((4, 256)), (4, 256), name, method=method)
            assert np.all(dequantize_tensor(qt) == 0)

    x = np.random.default_rng(2024).standard_normal((100, 256))
    rmse = []
    for name in KFORMATS:
        y = dequantize_tensor(quantize_tensor(x, (100, 256), name)).astype(np.float64)
        rmse.append(float(np.mean(np.sqrt(np.mean((y - x.astype(np.float32)) ** 2, axis=1)))))
    assert all(a > b for a, b in zip(rmse, rmse[1:])), rmse


_HASH_SCRIPT = """
import hashlib, sys
from kqf.container import to_bytes
from kqf.kquant import set_threads
from kqf.quantize import quantize_model
from kqf.recipes import builtin_recipes, plan_allocation
from kqf.toy import make_toy_model, toy_arch
print(set_threads(), file=sys.stderr)
arch = toy_arch()
model = make_toy_model(0, arch)
for name, r in builtin_recipes().items():
    print(name, hashlib.sha256(to_bytes(quantize_model(model, plan_allocation(arch, r)))).hexdigest())
"""


def test_end_to_end_toy():
    t0 = time.perf_counter()
    arch = toy_arch()
    model = make_toy_model(0, arch)
    digests = {}
    for name, recipe in builtin_recipes().items():
        plan = plan_allocation(arch, recipe)
        first = to_bytes(quantize_model(model, plan))
        assert to_bytes(quantize_model(model, plan)) == first, name
        digests[name] = hashlib.sha256(first).hexdigest()

    # a separate process running four worker threads
    env = {**os.environ, "NUMBA_NUM_THREADS": "4", "KQF_THREADS": "4"}
    r = subprocess.run([sys.executable, "-c", _HASH_SCRIPT], capture_output=True, text=True, env=env, check=True)
    assert r.stderr.strip() == "4"
    assert dict(line.split() for line in r.stdout.splitlines()) == digests

    order = ["Q4_K_M", "DQ3_K_M", "Q2_K_L"]
    ok = 0
    for seed in range(5):
        m = make_toy_model(seed, arch)
        errs = [analyze(m, plan_allocation(arch, get_recipe(name))).aggregate for name in order]
        ok += errs[0] <= errs[1] <= errs[2]
    assert ok >= 4, ok
    assert time.perf_counter() - t0 < 120
