"""Size and memory estimates straight from the config, no weights needed."""

from pathlib import Path

from kqf.arch import ModelArch
from kqf.estimate import BUILTIN_DEVICES, GIB, RuntimeOverheadModel, report, tensor_bytes
from kqf.recipes import builtin_recipes, plan_allocation

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
arch = ModelArch.load(CONFIGS / "deepseek-v3.json")

tensor_bytes((7168, 2048), "q4_k")  # 7168 * 8 blocks * 144 bytes

overhead = RuntimeOverheadModel.calibrated(arch)
print("kv bytes/token", overhead.per_token_bytes, "overhead@32K GiB", overhead(32768) / GIB)

print(f"{'recipe':9s} {'bpw':>5s} {'GiB':>6s} {'MU GiB':>7s} {'per GPU':>7s}")
for name, recipe in builtin_recipes().items():
    rep = report(plan_allocation(arch, recipe), arch, context_len=32768, n_devices=8)
    print(f"{name:9s} {rep.avg_bpw:5.2f} {rep.weight_gib:6.1f} {rep.mu_total_bytes / GIB:7.1f} {rep.per_device_gib:7d}")

rep = report(plan_allocation(arch, builtin_recipes()["DQ3_K_M"]), arch, devices=BUILTIN_DEVICES.values())
for v in rep.fits:
    print(v.device, v.verdict, f"margin {v.margin_bytes / GIB:+.1f} GiB")

# per-format breakdown
for fmt, t in rep.format_totals().items():
    print(fmt, t)

# shorter context, fewer devices
report(plan_allocation(arch, builtin_recipes()["Q2_K_XL"]), arch, context_len=8192, n_devices=4).per_device_gib
