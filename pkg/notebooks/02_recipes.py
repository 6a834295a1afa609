"""Recipes turn an architecture into a per-tensor format plan."""

from collections import Counter
from pathlib import Path

from kqf.arch import ModelArch
from kqf.recipes import QuantRecipe, builtin_recipes, get_recipe, plan_allocation, split_to_counts

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

arch = ModelArch.load(CONFIGS / "deepseek-v3.json")
print(arch.name, arch.n_layers, "layers,", arch.n_moe_layers, "MoE,", len(arch.tensors()), "tensors")

for name, r in builtin_recipes().items():
    print(name, "default", r.default.name)

dq3 = get_recipe("DQ3_K_M")
dq3.entries["ffn_down_exps"]  # a percentage split over MoE layers

# percentages become layer counts by largest remainder
split_to_counts([("q6_k", 0.03), ("q4_k", 0.20), ("q3_k", 0.77)], 58)

plan = plan_allocation(arch, dq3)
plan.format_counts("ffn_down_exps")  # {'q6_k': 2, 'q4_k': 12, 'q3_k': 44}
layout = {a.tensor.layer: a.format.name for a in plan if a.tensor.role == "ffn_down_exps"}
print("".join({"q6_k": "6", "q4_k": "4", "q3_k": "3"}[layout[k]] for k in sorted(layout)))

# every tensor gets exactly one format
print(Counter(a.format.name for a in plan))
print("fallbacks", [a.tensor.name for a in plan if a.fallback_applied])

# recipe files: JSON or TOML
stride = QuantRecipe.load(CONFIGS / "recipes" / "dq3_k_m_stride.json")
plan_allocation(arch, stride).format_counts("ffn_down_exps")

# plans serialize, and round trip
doc = plan.to_dict()
type(plan).from_dict(doc) == plan
