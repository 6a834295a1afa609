"""``kqf`` command line: quantize, plan, estimate, inspect, analyze, compare.

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .analysis import ErrorReport, analyze, compare
from .arch import ModelArch
from .container import describe, read_container, write_container
from .estimate import DEFAULT_CONTEXT, GIB, RuntimeOverheadModel, report, resolve_devices
from .kquant.codec import METHODS, set_threads
from .quantize import quantize_model
from .recipes import AllocationPlan, UnknownRecipeError, get_recipe, plan_allocation
from .toy import make_toy_model, toy_arch


class UsageError(Exception):
    """Bad invocation: exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # keep argparse's exit status, our prefix
        self.print_usage(sys.stderr)
        print(f"kqf: error: {message}", file=sys.stderr)
        raise SystemExit(2)


# -- helpers ------------------------------------------------------------------

def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _out_dir_ok(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return p


def _atomic_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _emit(args, doc: dict, text: str) -> None:
    body = json.dumps(doc, indent=2) + "\n" if args.json else text.rstrip("\n") + "\n"
    out = getattr(args, "report_path", None)
    if out:
        _atomic_text(_out_dir_ok(out), body)
    else:
        sys.stdout.write(body)


def _arch(path: str) -> ModelArch:
    return ModelArch.load(_existing(path, "architecture file"))


def _recipe(name: str):
    try:
        return get_recipe(name)
    except UnknownRecipeError as e:
        raise UsageError(str(e)) from None


def _progress(args):
    if not getattr(args, "progress", False):
        return None

    def show(k: int, n: int, name: str) -> None:
        end = "\n" if k == n else "\r"
        print(f"[{k}/{n}] {name[:60]:<60}", end=end, file=sys.stderr, flush=True)

    return show


def _load_plan_doc(spec: str) -> dict:
    if spec == "-":
        text = sys.stdin.read()
    else:
        text = _existing(spec, "plan file").read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"plan is not valid JSON: {e}") from None


def _plan_and_arch(args) -> tuple[AllocationPlan, ModelArch | None]:
    if getattr(args, "plan", None):
        if args.recipe:
            raise UsageError("--plan and --recipe are mutually exclusive")
        doc = _load_plan_doc(args.plan)
        plan = AllocationPlan.from_dict(doc)
        if args.arch:
            arch = _arch(args.arch)
        elif "arch_config" in doc:
            arch = ModelArch.from_dict(doc["arch_config"])
        else:
            arch = None
        return plan, arch
    if not (args.arch and args.recipe):
        raise UsageError("give --arch and --recipe, or --plan")
    arch = _arch(args.arch)
    return plan_allocation(arch, _recipe(args.recipe)), arch


def _role_summary(plan: AllocationPlan) -> dict[str, dict[str, int]]:
    roles: dict[str, dict[str, int]] = {}
    for a in plan:
        d = roles.setdefault(a.tensor.role, {})
        d[a.format.name] = d.get(a.format.name, 0) + 1
    return roles


def _role_table(roles: dict[str, dict[str, int]]) -> list[str]:
    lines = [f"{'role':<18} formats"]
    for role, counts in roles.items():
        lines.append(f"{role:<18} " + ", ".join(f"{f}:{n}" for f, n in counts.items()))
    return lines


# -- subcommands ----------------------------------------------------------------

def cmd_plan(args) -> int:
    arch = _arch(args.arch)
    recipe = _recipe(args.recipe)
    plan = plan_allocation(arch, recipe)
    doc = plan.to_dict()
    doc["arch_config"] = arch.to_dict()
    fallbacks = [a for a in plan if a.fallback_applied]
    lines = [f"plan {recipe.name} for {arch.name}: {len(plan)} tensors, {plan.total_params:,} parameters", ""]
    lines += _role_table(_role_summary(plan))
    if fallbacks:
        lines += ["", "fallbacks (row not block-aligned):"]
        lines += [f"  {a.tensor.name} {a.tensor.shape}: {a.requested.name} -> {a.format.name}" for a in fallbacks]
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_estimate(args) -> int:
    plan, arch = _plan_and_arch(args)
    if args.context < 0:
        raise UsageError("--context must be >= 0")
    if args.n_devices < 1:
        raise UsageError("--n-devices must be >= 1")
    if args.overhead_gib is not None:
        if args.overhead_gib < 0:
            raise UsageError("--overhead-gib must be >= 0")
        overhead = RuntimeOverheadModel(int(round(args.overhead_gib * GIB)), 0)
    elif arch is not None:
        overhead = RuntimeOverheadModel.calibrated(arch)
    else:
        overhead = RuntimeOverheadModel()
    try:
        devices = resolve_devices(args.devices)
    except ValueError as e:
        raise UsageError(str(e)) from None
    n_devices = args.n_devices
    if args.devices and len(devices) == 1 and args.n_devices_default:
        n_devices = devices[0].devices_per_node
    rep = report(plan, arch, args.context, overhead, devices, n_devices)
    _emit(args, rep.to_dict(per_tensor=args.per_tensor), rep.to_text(per_tensor=args.per_tensor))
    return 0


def cmd_quantize(args) -> int:
    src_path = _existing(args.input, "input model")
    out = _out_dir_ok(args.output)
    arch = _arch(args.arch)
    recipe = _recipe(args.recipe)
    plan = plan_allocation(arch, recipe)
    with read_container(src_path) as src:
        q = quantize_model(src, plan, method=args.method, progress=_progress(args))
        write_container(q, out)
    total = sum(t.n_elements for t in q.tensors)
    nbytes = sum(t.nbytes for t in q.tensors)
    roles: dict[str, dict[str, int]] = {}
    role_of = {a.tensor.name: a.tensor.role for a in plan}
    fmts: dict[str, int] = {}
    for t in q.tensors:
        d = roles.setdefault(role_of[t.name], {})
        d[t.format.name] = d.get(t.format.name, 0) + 1
        fmts[t.format.name] = fmts.get(t.format.name, 0) + 1
    doc = {
        "schema": "kqf.quantize/1",
        "output": str(out),
        "arch": arch.name,
        "recipe": recipe.name,
        "method": args.method,
        "n_tensors": len(q.tensors),
        "total_params": total,
        "weight_bytes": nbytes,
        "avg_bpw": nbytes * 8 / total,
        "formats": fmts,
        "roles": roles,
    }
    lines = [f"wrote {out}: {len(q.tensors)} tensors, {nbytes:,} bytes, avg {doc['avg_bpw']:.3f} bpw", ""]
    lines += _role_table(roles)
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_inspect(args) -> int:
    with read_container(_existing(args.input, "container")) as c:
        doc = describe(c)
    doc = {"schema": "kqf.inspect/1", "path": args.input, **doc}
    lines = [f"GGUF v{doc['version']}, alignment {doc['alignment']}, {len(doc['tensors'])} tensors", "", "metadata:"]
    for k, v in doc["metadata"].items():
        val = v.get("value", f"<{v.get('count')} items>")
        lines.append(f"  {k:<32} {v['type']:<14} {val}")
    lines += ["", f"{'tensor':<34}{'type':<6}{'shape':<22}{'offset':>12}{'bytes':>12}"]
    for t in doc["tensors"]:
        shape = "x".join(map(str, t["shape"]))
        lines.append(f"{t['name']:<34}{t['type']:<6}{shape:<22}{t['offset']:>12}{t['nbytes']:>12}")
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_analyze(args) -> int:
    src_path = _existing(args.input, "input model")
    plan, _ = _plan_and_arch(args)
    with read_container(src_path) as src:
        rep = analyze(src, plan, method=args.method, progress=_progress(args))
    _emit(args, rep.to_dict(), rep.to_text())
    return 0


def cmd_compare(args) -> int:
    reps = []
    for p in (args.report_a, args.report_b):
        try:
            reps.append(ErrorReport.from_dict(json.loads(_existing(p, "report").read_text())))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ValueError(f"{p}: not a JSON report ({e})") from None
    cmp = compare(*reps)
    _emit(args, cmp.to_dict(), cmp.to_text())
    return 0


def cmd_toy(args) -> int:
    out = _out_dir_ok(args.output)
    arch = _arch(args.arch) if args.arch else toy_arch()
    write_container(make_toy_model(args.seed, arch, dtype=args.dtype), out)
    doc = {"schema": "kqf.toy/1", "output": str(out), "arch": arch.name, "seed": args.seed,
           "total_params": arch.total_params}
    _emit(args, doc, f"wrote {out}: {arch.name}, seed {args.seed}, {arch.total_params:,} parameters")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kqf", description="Super-block k-quant toolkit.")
    p.add_argument("--version", action="version", version=f"kqf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, threads=False):
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        if threads:
            sp.add_argument("--threads", type=int, default=None,
                            help="worker threads (default: KQF_THREADS or all cores)")
            sp.add_argument("--method", choices=METHODS, default="lsq",
                            help="block fitting: grid least squares (lsq) or the reference heuristic (ggml)")
            sp.add_argument("--progress", action="store_true", help="tensor counter on stderr")

    sp = sub.add_parser("quantize", help="quantize an F16/F32 container with a recipe")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--recipe", required=True, help="built-in name or recipe file (JSON/TOML)")
    sp.add_argument("--arch", required=True, help="architecture JSON")
    common(sp, threads=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("plan", help="per-tensor format assignment for arch + recipe")
    sp.add_argument("--arch", required=True)
    sp.add_argument("--recipe", required=True)
    sp.add_argument("-o", "--output", dest="report_path", help="write to file instead of stdout")
    common(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("estimate", help="size, bpw and memory estimate (no weights needed)")
    sp.add_argument("--arch")
    sp.add_argument("--recipe")
    sp.add_argument("--plan", help="plan JSON file, or - for stdin")
    sp.add_argument("--context", type=int, default=DEFAULT_CONTEXT, help="context length in tokens")
    sp.add_argument("--n-devices", type=int, default=None, help="devices to split over (default 8)")
    sp.add_argument("--devices", help="built-in (8x80GB, 8x64GB), NxMGB spec, comma list, or inventory JSON")
    sp.add_argument("--overhead-gib", type=float, default=None,
                    help="fixed runtime overhead in GiB (default: calibrated model, 188 GiB at 32K tokens)")
    sp.add_argument("--per-tensor", action="store_true", help="include the per-tensor table")
    sp.add_argument("-o", "--output", dest="report_path", help="write to file instead of stdout")
    common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("inspect", help="dump container directory and metadata")
    sp.add_argument("input")
    common(sp)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("analyze", help="per-tensor quantization error of a recipe")
    sp.add_argument("input", help="F16/F32 container")
    sp.add_argument("--arch")
    sp.add_argument("--recipe")
    sp.add_argument("--plan")
    sp.add_argument("-o", "--output", dest="report_path", help="write to file instead of stdout")
    common(sp, threads=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("compare", help="align two analyze --json reports")
    sp.add_argument("report_a")
    sp.add_argument("report_b")
    sp.add_argument("-o", "--output", dest="report_path", help="write to file instead of stdout")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("toy", help="write a seeded toy MoE model (F32/F16)")
    sp.add_argument("output")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--arch", help="architecture JSON (default: built-in toy)")
    sp.add_argument("--dtype", choices=("f32", "f16"), default="f32")
    common(sp)
    sp.set_defaults(func=cmd_toy)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "estimate":
        args.n_devices_default = args.n_devices is None
        if args.n_devices is None:
            args.n_devices = 8
    try:
        if hasattr(args, "threads"):
            if args.threads is not None and args.threads < 1:
                raise UsageError("--threads must be >= 1")
            set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"kqf: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except (ValueError, OSError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"kqf {args.command}: {msg}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
