from __future__ import annotations

import json
import os
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = ROOT / "configs"
sys.path.insert(0, str(ROOT / "tools"))

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

KFORMATS = ["q2_k", "q3_k", "q4_k", "q5_k", "q6_k", "q8_0"]


def f32_from_hex(h: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(h), dtype="<f4").astype(np.float32)


@lru_cache(maxsize=None)
def golden() -> dict:
    return json.loads((FIXTURES / "codec_golden.json").read_text())


def golden_vector(name: str) -> np.ndarray:
    return f32_from_hex(golden()["vectors"][name])


@pytest.fixture(scope="session")
def g1() -> np.ndarray:
    """Fixed-seed Gaussian 256-vector used across the codec examples."""
    return golden_vector("gauss-1")


@pytest.fixture(scope="session")
def deepseek():
    from kqf.arch import ModelArch

    return ModelArch.load(CONFIGS / "deepseek-v3.json")


@pytest.fixture(scope="session")
def toy():
    from kqf.toy import toy_arch

    return toy_arch()


@lru_cache(maxsize=None)
def toy_report(seed: int, recipe: str):
    """Cached error report of one recipe on one toy seed (shared across test files)."""
    from kqf.analysis import analyze
    from kqf.recipes import get_recipe, plan_allocation
    from kqf.toy import make_toy_model, toy_arch

    arch = toy_arch()
    return analyze(make_toy_model(seed, arch), plan_allocation(arch, get_recipe(recipe)))


@lru_cache(maxsize=None)
def toy_quantized_bytes(seed: int, recipe: str) -> bytes:
    from kqf.container import to_bytes
    from kqf.quantize import quantize_model
    from kqf.recipes import get_recipe, plan_allocation
    from kqf.toy import make_toy_model, toy_arch

    arch = toy_arch()
    return to_bytes(quantize_model(make_toy_model(seed, arch), plan_allocation(arch, get_recipe(recipe))))


def ggml_available() -> bool:
    try:
        import ggml_oracle

        ggml_oracle.load()
        return True
    except OSError:
        return False


needs_ggml = pytest.mark.skipif(not ggml_available(), reason="reference codec library not built (see tools/ggml_oracle.py)")


# -- acceptance summary --------------------------------------------------------
_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid.split("::", 1)[1]] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{verdict}  {name}")
