"""Per-tensor error of each recipe on a seeded toy MoE."""

from kqf.analysis import analyze, compare
from kqf.quantize import quantize_model
from kqf.recipes import builtin_recipes, get_recipe, plan_allocation
from kqf.toy import make_toy_model, toy_arch

arch = toy_arch()
model = make_toy_model(0, arch)
print(arch.name, arch.total_params, "params", len(model.tensors), "tensors")

reports = {}
for name, recipe in builtin_recipes().items():
    reports[name] = analyze(model, plan_allocation(arch, recipe))
    print(f"{name:8s} aggregate rel err {reports[name].aggregate:.5f}")

# worst tensors under Q2_K_L
rows = sorted(reports["Q2_K_L"].rows, key=lambda r: r.rel_fro_err, reverse=True)
for r in rows[:5]:
    print(r.name, r.format, f"{r.rel_fro_err:.4f}")

cmp = compare(reports["Q2_K_L"], reports["Q4_K_M"])
print(f"aggregate delta Q2_K_L - Q4_K_M {cmp.aggregate_delta:+.5f}")

# the quantized model itself
q = quantize_model(model, plan_allocation(arch, get_recipe("DQ3_K_M")))
print(sum(t.nbytes for t in q.tensors), "bytes of tensor data")
