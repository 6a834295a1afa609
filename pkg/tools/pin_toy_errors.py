"""Pin the seed-0 toy-model error report as a regression fixture.

Run from the repository root after an intentional encoder change::

    python tools/pin_toy_errors.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from kqf.analysis import analyze  # noqa: E402
from kqf.recipes import builtin_recipes, plan_allocation  # noqa: E402
from kqf.toy import make_toy_model, toy_arch  # noqa: E402

SEED = 0


def main() -> None:
    arch = toy_arch()
    model = make_toy_model(SEED, arch)
    out = {"seed": SEED, "aggregate": {}, "rmse": {}}
    for name, recipe in builtin_recipes().items():
        rep = analyze(model, plan_allocation(arch, recipe))
        out["aggregate"][name] = rep.aggregate
        out["rmse"][name] = {r.name: r.rmse for r in rep.rows}
    path = ROOT / "tests" / "fixtures" / "toy_errors.json"
    path.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
