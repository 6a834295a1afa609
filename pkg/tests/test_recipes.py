import json
from fractions import Fraction
from itertools import product

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kqf.arch import ArchError, ModelArch
from kqf.kquant.formats import precision_rank
from kqf.recipes import (
    AllocationPlan,
    Dynamic,
    Fixed,
    QuantRecipe,
    RecipeError,
    Split,
    UnknownRecipeError,
    UnmappedRoleError,
    builtin_recipes,
    get_recipe,
    place_split,
    plan_allocation,
    split_to_counts,
)
from kqf.toy import toy_arch

from conftest import CONFIGS

# Transcription of the published per-matrix allocation table, one line per
# row: Q4_K_M, Q3_K_M, DQ3_K_M, Q2_K_L, Q2_K_XL.
TABLE = """
output          q6_k q6_k q6_k q6_k q6_k
token_embd      q4_k q3_k q4_k q4_k q4_k
attn_kv_a_mqa   q4_k q3_k q6_k q6_k q6_k
attn_kv_b       q4_k q3_k q6_k q2_k q6_k
attn_output     q4_k q4_k q4_k q3_k q4_k
attn_q_a        q4_k q3_k q4_k q2_k q4_k
attn_q_b        q4_k q3_k q4_k q2_k q4_k
ffn_down        q6_k q5_k q6_k q3_k q6_k
ffn_gate        q4_k q3_k q4_k q2_k q4_k
ffn_up          q4_k q3_k q4_k q2_k q4_k
ffn_down_exps   q4_k:53.4,q6_k:46.6 q4_k q3_k:75.9,q4_k:20.7,q6_k:3.40 q3_k q2_k:94.8,q3_k:5.20
ffn_down_shexp  q4_k:53.4,q6_k:46.6 q4_k q6_k q3_k q6_k
ffn_gate_exps   q4_k q3_k q3_k q2_k q2_k
ffn_gate_shexp  q4_k q3_k q4_k q2_k q4_k
ffn_up_exps     q4_k q3_k q3_k q2_k q2_k
ffn_up_shexp    q4_k q3_k q4_k q2_k q4_k
"""
COLUMNS = ["Q4_K_M", "Q3_K_M", "DQ3_K_M", "Q2_K_L", "Q2_K_XL"]


def _cell(text):
    if ":" not in text:
        return ("fixed", text)
    parts = {}
    for p in text.split(","):
        f, pct = p.split(":")
        parts[f] = Fraction(pct) / 100
    return ("split", parts)


def _reference():
    ref = {c: {} for c in COLUMNS}
    for line in TABLE.strip().splitlines():
        role, *cells = line.split()
        for col, cell in zip(COLUMNS, cells):
            ref[col][role] = _cell(cell)
    return ref


def _entry(e):
    if isinstance(e, Fixed):
        return ("fixed", e.format.name)
    assert isinstance(e, Split)
    return ("split", {f.name: Fraction(str(p)) for f, p in e.parts})


def test_builtins_cell_for_cell():
    recipes = builtin_recipes()
    assert sorted(recipes) == sorted(COLUMNS)
    for col, rows in _reference().items():
        r = recipes[col]
        assert sorted(r.entries) == sorted(rows), col
        for role, want in rows.items():
            assert _entry(r.entries[role]) == want, (col, role)


@pytest.mark.parametrize(
    "recipe,role,fmt",
    [("DQ3_K_M", "attn_kv_a_mqa", "q6_k"), ("Q2_K_L", "ffn_down", "q3_k"), ("Q2_K_L", "attn_kv_b", "q2_k"),
     ("Q3_K_M", "ffn_down_exps", "q4_k")],
)
def test_builtin_examples(recipe, role, fmt):
    e = builtin_recipes()[recipe].entries[role]
    assert isinstance(e, Fixed) and e.format.name == fmt


def test_get_recipe_lookup(tmp_path):
    assert get_recipe("dq3_k_m").name == "DQ3_K_M"
    assert get_recipe("UD-Q2_K_XL").name == "Q2_K_XL"
    with pytest.raises(UnknownRecipeError, match="unknown recipe 'Q1_K_S'"):
        get_recipe("Q1_K_S")
    p = tmp_path / "r.json"
    builtin_recipes()["Q2_K_L"].save(p)
    assert get_recipe(p) == builtin_recipes()["Q2_K_L"]
    with pytest.raises(RecipeError, match="not found"):
        get_recipe(tmp_path / "missing.json")


# -- apportionment ---------------------------------------------------------------

def _fmts(counts):
    return {f.name: c for f, c in counts}


def test_split_examples():
    dq3 = [("q3_k", 0.759), ("q4_k", 0.207), ("q6_k", 0.034)]
    assert _fmts(split_to_counts(dq3, 58)) == {"q6_k": 2, "q4_k": 12, "q3_k": 44}
    assert _fmts(split_to_counts([("q5_k", 1.0)], 7)) == {"q5_k": 7}
    assert _fmts(split_to_counts([("q4_k", 0.534), ("q6_k", 0.466)], 58)) == {"q4_k": 31, "q6_k": 27}
    # highest precision listed first
    assert [f.name for f, _ in split_to_counts(dq3, 58)] == ["q6_k", "q4_k", "q3_k"]


def test_dq3_counts_reproduce_published_percentages():
    # 2/58, 12/58, 44/58 rounded to the table's precision
    assert (round(100 * 2 / 58, 1), round(100 * 12 / 58, 1), round(100 * 44 / 58, 1)) == (3.4, 20.7, 75.9)


def _brute_force(fracs, n):
    """Exhaustive largest-remainder oracle: among all count vectors summing to
    n that floor each quota, keep the ones granting the extra units to the
    largest remainders; break ties toward higher precision."""
    quotas = [Fraction(str(p)) * n for _, p in fracs]
    floors = [int(q) for q in quotas]
    left = n - sum(floors)
    best = None
    for bump in product([0, 1], repeat=len(fracs)):
        if sum(bump) != left:
            continue
        key = sorted(
            ((quotas[i] - floors[i], precision_rank(fracs[i][0])) for i in range(len(fracs)) if bump[i]),
            reverse=True,
        )
        if best is None or key > best[0]:
            best = (key, bump)
    return {f: floors[i] + best[1][i] for i, (f, _) in enumerate(fracs)}


@st.composite
def fraction_sets(draw):
    fmts = draw(st.lists(st.sampled_from(["q2_k", "q3_k", "q4_k", "q5_k", "q6_k", "q8_0"]), min_size=1,
                         max_size=4, unique=True))
    cuts = sorted(draw(st.lists(st.integers(1, 999), min_size=len(fmts) - 1, max_size=len(fmts) - 1, unique=True)))
    edges = [0, *cuts, 1000]
    return [(f, (b - a) / 1000) for f, a, b in zip(fmts, edges, edges[1:])]


@given(fracs=fraction_sets(), n=st.integers(1, 500))
def test_apportionment_exact(fracs, n):
    counts = _fmts(split_to_counts(fracs, n))
    assert sum(counts.values()) == n
    for f, p in fracs:
        assert abs(counts[f] - Fraction(str(p)) * n) < 1
    assert counts == _brute_force(fracs, n)


def test_tie_goes_to_higher_precision():
    assert _fmts(split_to_counts([("q3_k", 0.5), ("q4_k", 0.5)], 3)) == {"q4_k": 2, "q3_k": 1}


@pytest.mark.parametrize(
    "fracs", [[("q4_k", 0.5), ("q6_k", 0.4)], [("q4_k", 0.0), ("q6_k", 1.0)], [("q4_k", 0.5), ("q4_k", 0.5)]]
)
def test_invalid_split(fracs):
    with pytest.raises(RecipeError):
        split_to_counts(fracs, 10)


# -- placement ---------------------------------------------------------------------

DQ3_FRACTIONS = {"q3_k": 0.759, "q4_k": 0.207, "q6_k": 0.034}


def _moe_arch(n_moe):
    return toy_arch(n_layers=n_moe + 1, n_dense_layers=1)


@pytest.mark.parametrize("n_moe", [1, 2, 5, 13, 29, 58, 61, 100])
def test_dq3_fractions_within_one_layer(n_moe):
    plan = plan_allocation(_moe_arch(n_moe), get_recipe("DQ3_K_M"))
    counts = plan.format_counts("ffn_down_exps")
    assert sum(counts.values()) == n_moe
    for f, p in DQ3_FRACTIONS.items():
        assert abs(counts.get(f, 0) / n_moe - p) <= 1 / n_moe


def test_dq3_deepseek_positions(deepseek):
    plan = plan_allocation(deepseek, get_recipe("DQ3_K_M"))
    downs = [a for a in plan if a.tensor.role == "ffn_down_exps"]
    assert len(downs) == 58
    assert plan.format_counts("ffn_down_exps") == {"q6_k": 2, "q4_k": 12, "q3_k": 44}
    assert [a.tensor.layer for a in downs if a.format.name == "q6_k"] == [3, 4]
    q4 = [a.tensor.layer - 3 for a in downs if a.format.name == "q4_k"]
    # spread across the MoE range rather than bunched together
    assert q4 == [2 + j * 56 // 12 for j in range(12)]
    assert max(b - a for a, b in zip(q4, q4[1:])) <= 5


@given(n=st.integers(1, 200), fracs=fraction_sets())
def test_layering_invariant(n, fracs):
    order = place_split(split_to_counts(fracs, n), n)
    assert len(order) == n
    top = max(precision_rank(f) for f in order)
    first_top = min(i for i, f in enumerate(order) if precision_rank(f) == top)
    assert all(precision_rank(f) == top for f in order[: first_top + 1])
    assert first_top == 0


@pytest.mark.parametrize("recipe", COLUMNS)
def test_plan_totality_and_determinism(deepseek, recipe):
    r = get_recipe(recipe)
    p1 = plan_allocation(deepseek, r)
    p2 = plan_allocation(deepseek, r)
    assert p1 == p2
    assert [a.tensor for a in p1] == list(deepseek.tensors())
    assert len({a.tensor.name for a in p1}) == len(p1)
    assert not any(a.fallback_applied for a in p1)


def test_unquantized_roles_stay_f32(deepseek):
    plan = plan_allocation(deepseek, get_recipe("Q4_K_M"))
    for a in plan:
        if len(a.tensor.shape) == 1 or a.tensor.role == "ffn_gate_inp":
            assert a.format.name == "f32"


def test_single_layer_all_q8_0():
    arch = toy_arch(n_layers=1, n_dense_layers=1)
    roles = [r for r in arch.roles() if r not in arch.unquantized_roles]
    recipe = QuantRecipe("all-q8", None, {r: Fixed(__import__("kqf").get_format("q8_0")) for r in roles})
    plan = plan_allocation(arch, recipe)
    assert all(a.format.name == ("q8_0" if len(a.tensor.shape) > 1 else "f32") for a in plan)
    assert not any(a.fallback_applied for a in plan)


def test_fallback_on_unaligned_rows():
    arch = toy_arch(shape_overrides={"attn_kv_a_mqa": (4, 100)})
    plan = plan_allocation(arch, get_recipe("Q4_K_M"))
    hits = [a for a in plan if a.tensor.role == "attn_kv_a_mqa"]
    assert hits and all(a.fallback_applied and a.requested.name == "q4_k" for a in hits)
    assert {a.format.name for a in hits} == {"f16"}  # 100 is not a multiple of 32 either
    arch = toy_arch(shape_overrides={"attn_kv_a_mqa": (4, 96)})
    hits = [a for a in plan_allocation(arch, get_recipe("Q4_K_M")) if a.tensor.role == "attn_kv_a_mqa"]
    assert {a.format.name for a in hits} == {"q8_0"} and all(a.fallback_applied for a in hits)


def test_unmapped_role(toy):
    r = builtin_recipes()["Q3_K_M"]
    partial = QuantRecipe("partial", None, {k: v for k, v in r.entries.items() if k != "attn_q_b"})
    with pytest.raises(UnmappedRoleError, match="unmapped role 'attn_q_b'"):
        plan_allocation(toy, partial)
    # a default covers it
    with_default = QuantRecipe("partial", r.default, partial.entries)
    assert plan_allocation(toy, with_default).format_counts("attn_q_b") == {"q3_k": toy.n_layers}


# -- dynamic rule ------------------------------------------------------------------

def test_dynamic_rule():
    g = __import__("kqf").get_format
    rule = Dynamic(2, g("q6_k"), 4, g("q4_k"), g("q3_k"))
    got = [rule.format_at(j).name for j in range(12)]
    assert got == ["q6_k", "q6_k", "q3_k", "q3_k", "q3_k", "q4_k", "q3_k", "q3_k", "q3_k", "q4_k", "q3_k", "q3_k"]
    with pytest.raises(RecipeError):
        Dynamic(0, g("q6_k"), 0, g("q4_k"), g("q3_k"))


def test_dynamic_recipe_file_stride_example():
    r = get_recipe(CONFIGS / "recipes" / "dq3_k_m_stride.json")
    e = r.entries["ffn_down_exps"]
    assert isinstance(e, Dynamic)
    counts = plan_allocation(_moe_arch(58), r).format_counts("ffn_down_exps")
    # every fourth post-head layer: 56 // 4 = 14 q4_k layers
    assert counts == {"q6_k": 2, "q4_k": 14, "q3_k": 42}


# -- serialization -----------------------------------------------------------------

@pytest.mark.parametrize("name", COLUMNS)
def test_recipe_json_round_trip(name, tmp_path):
    r = builtin_recipes()[name]
    assert QuantRecipe.from_dict(json.loads(json.dumps(r.to_dict()))) == r
    shipped = QuantRecipe.load(CONFIGS / "recipes" / f"{name.lower()}.json")
    assert shipped == r


def test_recipe_toml():
    r = QuantRecipe.load(CONFIGS / "recipes" / "dq3_k_m.toml")
    assert r == builtin_recipes()["DQ3_K_M"]


def test_recipe_aliases_and_errors():
    r = QuantRecipe.from_dict({"name": "x", "default": "q4_k", "ffn_gate_exp": "q3_k", "ffn_up_exp": "q2_k"})
    assert r.entries["ffn_gate_exps"].format.name == "q3_k"
    assert r.entries["ffn_up_exps"].format.name == "q2_k"
    with pytest.raises(RecipeError, match="given twice"):
        QuantRecipe.from_dict({"name": "x", "ffn_gate_exp": "q3_k", "roles": {"ffn_gate_exps": "q2_k"}})
    with pytest.raises(RecipeError):
        QuantRecipe.from_dict({"name": "x", "attn_q_a": "q7_k"})
    with pytest.raises(RecipeError, match="dynamic rule"):
        QuantRecipe.from_dict({"name": "x", "attn_q_a": {"head": 1}})
    with pytest.raises(RecipeError, match="name"):
        QuantRecipe.from_dict({"default": "q4_k"})


def test_plan_json_round_trip(toy):
    p = plan_allocation(toy, get_recipe("DQ3_K_M"))
    assert AllocationPlan.from_dict(json.loads(json.dumps(p.to_dict()))) == p
    with pytest.raises(RecipeError):
        AllocationPlan.from_dict({"arch": "x"})


# -- architecture ------------------------------------------------------------------

def test_deepseek_parameter_count(deepseek):
    assert deepseek.total_params == 671_026_419_200
    assert abs(deepseek.total_params - 671e9) / 671e9 < 0.001
    assert len(deepseek.tensors()) == 1025
    assert deepseek.n_moe_layers == 58


def test_role_vocabulary(deepseek):
    table_roles = {line.split()[0] for line in TABLE.strip().splitlines()}
    assert table_roles <= set(deepseek.roles())
    for t in deepseek.tensors():
        assert t.layer is None or 0 <= t.layer < deepseek.n_layers
        assert all(s > 0 for s in t.shape)


def test_toy_config_matches_builtin(toy):
    assert ModelArch.load(CONFIGS / "toy-moe.json") == toy
    assert toy.total_params == 6_808_848


def test_arch_round_trip_and_errors(tmp_path, toy):
    p = tmp_path / "a.json"
    toy.save(p)
    assert ModelArch.load(p) == toy
    d = toy.to_dict()
    with pytest.raises(ArchError, match="unknown"):
        ModelArch.from_dict({**d, "n_experts": 3})
    d.pop("hidden_dim")
    with pytest.raises(ArchError, match="missing.*hidden_dim"):
        ModelArch.from_dict(d)
    with pytest.raises(ArchError):
        toy_arch(n_dense_layers=9)


def test_hf_config_ingestion():
    cfg = {
        "model_type": "deepseek_v3", "hidden_size": 7168, "num_hidden_layers": 61, "first_k_dense_replace": 3,
        "intermediate_size": 18432, "moe_intermediate_size": 2048, "n_routed_experts": 256,
        "n_shared_experts": 1, "vocab_size": 129280, "q_lora_rank": 1536, "kv_lora_rank": 512,
        "qk_rope_head_dim": 64, "num_attention_heads": 128, "qk_nope_head_dim": 128, "v_head_dim": 128,
    }
    arch = ModelArch.from_dict(cfg)
    assert arch.total_params == 671_026_419_200
