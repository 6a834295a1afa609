import json
import math

import numpy as np
import pytest

from kqf.analysis import (
    AnalysisError,
    ErrorReport,
    ErrorRow,
    UnplannedTensorError,
    aggregate_of,
    analyze,
    compare,
    tensor_error,
)
from kqf.container import ContainerFile
from kqf.kquant import dequantize_tensor, get_format, quantize_tensor
from kqf.kquant.formats import precision_rank
from kqf.recipes import AllocationPlan, Assignment, Fixed, QuantRecipe, builtin_recipes, get_recipe, plan_allocation
from kqf.toy import make_toy_model, toy_arch

from conftest import FIXTURES, toy_report

SMALL = toy_arch(n_layers=2, n_dense_layers=1, vocab_size=256, n_routed_experts=2)


def _f32_plan(arch):
    return AllocationPlan(arch.name, "identity", tuple(Assignment(t, get_format("f32")) for t in arch.tensors()))


def test_identity_plan_zero_error():
    rep = analyze(make_toy_model(0, SMALL), _f32_plan(SMALL))
    assert len(rep.rows) == len(SMALL.tensors())
    assert all(r.rmse == r.max_abs_err == r.rel_fro_err == 0 for r in rep.rows)
    assert rep.aggregate == 0


def test_zero_model():
    rep = analyze(make_toy_model(0, SMALL, zero=True), plan_allocation(SMALL, get_recipe("Q2_K_L")))
    assert all(r.rmse == 0 and r.rel_fro_err == 0 and r.zero_norm for r in rep.rows)
    assert "zero norm" in rep.to_text()


def _two_pass_rmse(ref, approx):
    ref = [float(v) for v in np.asarray(ref).reshape(-1)]
    approx = [float(v) for v in np.asarray(approx).reshape(-1)]
    diffs = [a - r for a, r in zip(approx, ref)]
    mean = math.fsum(diffs) / len(diffs)
    var = math.fsum((d - mean) ** 2 for d in diffs) / len(diffs)
    return math.sqrt(var + mean * mean)


def test_rmse_matches_two_pass_oracle():
    model = make_toy_model(3, SMALL)
    plan = plan_allocation(SMALL, get_recipe("DQ3_K_M"))
    rep = analyze(model, plan)
    fmts = plan.by_name()
    for t, row in zip(model.tensors, rep.rows):
        x = np.frombuffer(t.data, dtype="<f4").reshape(t.shape)
        y = dequantize_tensor(quantize_tensor(x, t.shape, fmts[t.name].format))
        ref = _two_pass_rmse(x, y)
        assert row.rmse == pytest.approx(ref, rel=1e-9, abs=0)


def test_metrics_nonnegative_and_normalized():
    x = np.arange(8.0)
    row = tensor_error("t", "r", 0, "q4_k", x, x + 0.5)
    assert row.rmse == 0.5 and row.max_abs_err == 0.5
    assert row.rel_fro_err == pytest.approx(0.5 * math.sqrt(8) / math.sqrt(float(np.sum(x * x))))
    assert aggregate_of([row, row]) == row.rel_fro_err


def test_unplanned_tensor():
    model = make_toy_model(0, SMALL)
    model.add_tensor("extra.weight", (256,), "f32", np.ones(256, np.float32).tobytes())
    with pytest.raises(UnplannedTensorError, match="unplanned tensor 'extra.weight'"):
        analyze(model, plan_allocation(SMALL, get_recipe("Q4_K_M")))


def test_non_float_source_rejected():
    c = ContainerFile()
    c.add_tensor("w", (1, 256), "q4_k", bytes(144))
    t = SMALL.tensors()[0]
    plan = AllocationPlan("x", "y", (Assignment(type(t)("w", "attn_q_a", 0, (1, 256), "attention"), get_format("q4_k")),))
    with pytest.raises(AnalysisError, match="F16/F32"):
        analyze(c, plan)


def test_f16_source():
    rep16 = analyze(make_toy_model(0, SMALL, dtype="f16"), plan_allocation(SMALL, get_recipe("Q4_K_M")))
    rep32 = analyze(make_toy_model(0, SMALL), plan_allocation(SMALL, get_recipe("Q4_K_M")))
    assert rep16.aggregate == pytest.approx(rep32.aggregate, rel=0.02)


def test_progress_callback():
    seen = []
    analyze(make_toy_model(0, SMALL), _f32_plan(SMALL), progress=lambda k, n, name: seen.append((k, n)))
    assert seen[-1] == (len(SMALL.tensors()), len(SMALL.tensors()))


def test_report_json_round_trip():
    rep = analyze(make_toy_model(1, SMALL), plan_allocation(SMALL, get_recipe("Q3_K_M")))
    back = ErrorReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back == rep and back.aggregate == rep.aggregate
    with pytest.raises(AnalysisError):
        ErrorReport.from_dict({"rows": []})


# -- compare ---------------------------------------------------------------------

def test_self_compare():
    rep = toy_report(0, "DQ3_K_M")
    cmp = compare(rep, rep)
    assert len(cmp.rows) == len(rep.rows)
    assert all(r.delta_rmse == 0 and r.delta_rel == 0 for r in cmp.rows)
    assert cmp.aggregate_delta == 0 and not cmp.unmatched_a and not cmp.unmatched_b


def test_disjoint_compare():
    a = ErrorReport("a", (ErrorRow("x", "attn_q_a", 0, "q4_k", 10, 1, 1, 1),))
    b = ErrorReport("b", (ErrorRow("y", "attn_q_b", 1, "q4_k", 10, 1, 1, 1),))
    cmp = compare(a, b)
    assert cmp.rows == () and cmp.unmatched_a == (("attn_q_a", 0),) and cmp.unmatched_b == (("attn_q_b", 1),)
    assert "unmatched in A" in cmp.to_text()


def test_q2_k_l_against_q4_k_m():
    cmp = compare(toy_report(0, "Q2_K_L"), toy_report(0, "Q4_K_M"))
    assert len(cmp.rows) == len(toy_report(0, "Q4_K_M").rows)
    checked = 0
    for r in cmp.rows:
        if r.format_a == r.format_b == "f32":
            assert r.delta_rmse == 0
        elif precision_rank(r.format_a) < precision_rank(r.format_b):
            assert r.delta_rmse > 0, r
            checked += 1
        elif precision_rank(r.format_a) == precision_rank(r.format_b):
            assert r.delta_rmse == 0
    assert checked > 0
    assert cmp.aggregate_delta > 0
    json.dumps(cmp.to_dict())


# -- recipe ordering ---------------------------------------------------------------

ORDER = ["Q4_K_M", "DQ3_K_M", "Q3_K_M", "Q2_K_L"]
SEEDS = range(5)


def test_recipe_ordering_over_seeds():
    errs = {s: [toy_report(s, r).aggregate for r in ORDER] for s in SEEDS}
    for i in range(len(ORDER) - 1):
        violations = [s for s in SEEDS if not errs[s][i] <= errs[s][i + 1]]
        assert len(violations) <= 1, (ORDER[i], ORDER[i + 1], violations)


def test_dq3_below_all_q3_down_exps_variant():
    base = builtin_recipes()["Q3_K_M"]
    variant = QuantRecipe("Q3_K_M-q3down", base.default, {**base.entries, "ffn_down_exps": Fixed(get_format("q3_k"))})
    arch = toy_arch()
    for seed in (0, 1):
        v = analyze(make_toy_model(seed, arch), plan_allocation(arch, variant)).aggregate
        assert toy_report(seed, "Q4_K_M").aggregate < toy_report(seed, "DQ3_K_M").aggregate < v


def test_pinned_seed0_errors():
    pinned = json.loads((FIXTURES / "toy_errors.json").read_text())
    assert pinned["seed"] == 0
    for recipe, agg in pinned["aggregate"].items():
        rep = toy_report(0, recipe)
        assert rep.aggregate == pytest.approx(agg, rel=1e-9)
        for row in rep.rows:
            assert row.rmse == pytest.approx(pinned["rmse"][recipe][row.name], rel=1e-9, abs=1e-15)
