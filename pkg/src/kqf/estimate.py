"""Encoded size, bits per weight, memory usage and device-fit verdicts."""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .arch import ModelArch, TensorSpec
from .kquant.codec import check_row_alignment
from .kquant.formats import BlockFormat, get_format
from .recipes import AllocationPlan

GIB = 1 << 30
DEFAULT_CONTEXT = 32768

# Total runtime overhead (compute buffers, cache, runtime state) observed for
# the 671B deployment at a 32K context: the published memory rows minus the
# model sizes lie between 186 and 191 GiB across all five recipes.
CALIBRATED_OVERHEAD_BYTES = 188 * GIB
CALIBRATION_CONTEXT = DEFAULT_CONTEXT


class EstimateError(ValueError):
    pass


def tensor_bytes(spec: TensorSpec | Sequence[int], fmt: str | BlockFormat) -> int:
    """Encoded bytes of one tensor; the row must be a whole number of blocks."""
    fmt = get_format(fmt)
    shape = tuple(spec.shape if isinstance(spec, TensorSpec) else spec)
    check_row_alignment(shape, fmt, spec.role if isinstance(spec, TensorSpec) else None)
    return math.prod(shape) // fmt.block_len * fmt.block_bytes


@dataclass(frozen=True)
class RuntimeOverheadModel:
    """``overhead(ctx) = base_bytes + per_token_bytes * ctx``."""

    base_bytes: int = 0
    per_token_bytes: int = 0

    def __call__(self, context_len: int) -> int:
        if context_len < 0:
            raise EstimateError("context length must be >= 0")
        return self.base_bytes + self.per_token_bytes * context_len

    @staticmethod
    def kv_bytes_per_token(arch: ModelArch, bytes_per_value: int = 2) -> int:
        """Compressed latent cache: one (kv_lora + rope) vector per token per layer."""
        return arch.n_layers * (arch.kv_lora_rank + arch.rope_head_dim) * bytes_per_value

    @classmethod
    def calibrated(
        cls,
        arch: ModelArch,
        total_bytes: int = CALIBRATED_OVERHEAD_BYTES,
        at_context: int = CALIBRATION_CONTEXT,
    ) -> "RuntimeOverheadModel":
        """Fix the constant so that ``overhead(at_context) == total_bytes``."""
        per_token = cls.kv_bytes_per_token(arch)
        base = total_bytes - per_token * at_context
        if base < 0:
            raise EstimateError("calibration total is smaller than the cache term alone")
        return cls(base, per_token)

    def to_dict(self) -> dict:
        return {"base_bytes": self.base_bytes, "per_token_bytes": self.per_token_bytes}


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    memory_bytes: int
    devices_per_node: int = 8

    def __post_init__(self):
        if self.memory_bytes <= 0:
            raise EstimateError(f"device {self.name!r}: memory_bytes must be > 0")
        if self.devices_per_node < 1:
            raise EstimateError(f"device {self.name!r}: devices_per_node must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "DeviceProfile":
        """``8x64GB`` style: count, ``x``, per-device memory (GB/GiB both read as GiB)."""
        m = re.fullmatch(r"\s*(\d+)\s*[x×*]\s*(\d+(?:\.\d+)?)\s*(GIB|GB|G)?\s*", text, re.IGNORECASE)
        if not m:
            raise EstimateError(f"cannot parse device spec {text!r}; expected e.g. 8x64GB")
        count, mem = int(m.group(1)), float(m.group(2))
        return cls(f"{count}x{m.group(2)}GB", int(round(mem * GIB)), count)

    def to_dict(self) -> dict:
        return {"name": self.name, "memory_bytes": self.memory_bytes, "devices_per_node": self.devices_per_node}


BUILTIN_DEVICES = {
    "8x80GB": DeviceProfile("8x80GB", 80 * GIB, 8),
    "8x64GB": DeviceProfile("8x64GB", 64 * GIB, 8),
}


def load_devices(path: str | os.PathLike) -> list[DeviceProfile]:
    """Inventory file: a list of ``{name, memory_gib | memory_bytes, devices_per_node}``."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, Mapping):
        data = data.get("devices", [])
    out = []
    for d in data:
        if "memory_bytes" in d:
            mem = int(d["memory_bytes"])
        elif "memory_gib" in d:
            mem = int(round(float(d["memory_gib"]) * GIB))
        else:
            raise EstimateError(f"device entry {d!r} needs memory_bytes or memory_gib")
        out.append(DeviceProfile(str(d["name"]), mem, int(d.get("devices_per_node", 8))))
    return out


def resolve_devices(spec: str | None) -> list[DeviceProfile]:
    """Built-in name, ``NxMGB`` spec, comma list of those, or an inventory file."""
    if not spec:
        return list(BUILTIN_DEVICES.values())
    if os.path.isfile(spec):
        return load_devices(spec)
    out = []
    for part in spec.split(","):
        part = part.strip()
        out.append(BUILTIN_DEVICES.get(part) or DeviceProfile.parse(part))
    return out


@dataclass(frozen=True)
class FitVerdict:
    device: str
    n_devices: int
    per_device_bytes: int
    memory_bytes: int

    @property
    def fits(self) -> bool:
        return self.per_device_bytes <= self.memory_bytes

    @property
    def margin_bytes(self) -> int:
        return self.memory_bytes - self.per_device_bytes

    @property
    def verdict(self) -> str:
        return "FITS" if self.fits else "EXCEEDS"

    def to_dict(self) -> dict:
        return {
            "device": self.device,
            "n_devices": self.n_devices,
            "per_device_bytes": self.per_device_bytes,
            "memory_bytes": self.memory_bytes,
            "verdict": self.verdict,
            "margin_bytes": self.margin_bytes,
        }


@dataclass(frozen=True)
class TensorRow:
    name: str
    role: str
    layer: int | None
    format: str
    n_elements: int
    bytes: int


@dataclass(frozen=True)
class DeploymentReport:
    arch: str
    recipe: str
    total_params: int
    weight_bytes: int
    context_len: int
    overhead_bytes: int
    n_devices: int
    per_tensor: tuple[TensorRow, ...] = field(repr=False)
    fits: tuple[FitVerdict, ...] = ()

    @property
    def avg_bpw(self) -> float:
        return self.weight_bytes * 8 / self.total_params

    @property
    def mu_total_bytes(self) -> int:
        return self.weight_bytes + self.overhead_bytes

    @property
    def per_device_bytes(self) -> int:
        return -(-self.mu_total_bytes // self.n_devices)

    @property
    def weight_gib(self) -> float:
        return self.weight_bytes / GIB

    @property
    def per_device_gib(self) -> int:
        """Per-device memory rounded up to whole GiB."""
        return -(-self.mu_total_bytes // (self.n_devices * GIB))

    def format_totals(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.per_tensor:
            d = out.setdefault(r.format, {"tensors": 0, "params": 0, "bytes": 0})
            d["tensors"] += 1
            d["params"] += r.n_elements
            d["bytes"] += r.bytes
        return out

    def to_dict(self, per_tensor: bool = True) -> dict[str, Any]:
        d = {
            "schema": "kqf.estimate/1",
            "arch": self.arch,
            "recipe": self.recipe,
            "total_params": self.total_params,
            "weight_bytes": self.weight_bytes,
            "weight_gib": self.weight_bytes / GIB,
            "weight_gb": self.weight_bytes / 1e9,
            "avg_bpw": self.avg_bpw,
            "context_len": self.context_len,
            "overhead_bytes": self.overhead_bytes,
            "mu_total_bytes": self.mu_total_bytes,
            "mu_total_gib": self.mu_total_bytes / GIB,
            "n_devices": self.n_devices,
            "per_device_bytes": self.per_device_bytes,
            "per_device_gib": self.per_device_gib,
            "formats": self.format_totals(),
            "fits": [v.to_dict() for v in self.fits],
        }
        if per_tensor:
            d["per_tensor"] = [
                {"name": r.name, "role": r.role, "layer": r.layer, "format": r.format, "bytes": r.bytes}
                for r in self.per_tensor
            ]
        return d

    def to_text(self, per_tensor: bool = False) -> str:
        lines = [
            f"arch            {self.arch}",
            f"recipe          {self.recipe}",
            f"parameters      {self.total_params:,}",
            f"weight size     {self.weight_bytes:,} B = {self.weight_bytes / GIB:.1f} GiB ({self.weight_bytes / 1e9:.1f} GB)",
            f"avg bpw         {self.avg_bpw:.3f}",
            f"context         {self.context_len} tokens, overhead {self.overhead_bytes / GIB:.1f} GiB",
            f"MU total        {self.mu_total_bytes / GIB:.1f} GiB ({self.mu_total_bytes / 1e9:.1f} GB)",
            f"MU per device   {self.per_device_gib} GiB over {self.n_devices} devices "
            f"({self.per_device_bytes:,} B)",
            "",
            f"{'format':<8}{'tensors':>9}{'params':>18}{'GiB':>10}",
        ]
        for fmt, t in sorted(self.format_totals().items(), key=lambda kv: -kv[1]["bytes"]):
            lines.append(f"{fmt:<8}{t['tensors']:>9}{t['params']:>18,}{t['bytes'] / GIB:>10.2f}")
        if self.fits:
            lines += ["", f"{'device':<12}{'per device GiB':>16}{'memory GiB':>12}  verdict  margin GiB"]
            for v in self.fits:
                lines.append(
                    f"{v.device:<12}{v.per_device_bytes / GIB:>16.2f}{v.memory_bytes / GIB:>12.1f}  "
                    f"{v.verdict:<7}  {v.margin_bytes / GIB:+.2f}"
                )
        if per_tensor:
            lines += ["", f"{'tensor':<34}{'format':<8}{'bytes':>16}"]
            lines += [f"{r.name:<34}{r.format:<8}{r.bytes:>16,}" for r in self.per_tensor]
        return "\n".join(lines)


def fit_matrix(report: DeploymentReport, devices: Iterable[DeviceProfile]) -> list[FitVerdict]:
    """Verdict per device type, splitting the total evenly over one node."""
    out = []
    for dev in devices:
        per = -(-report.mu_total_bytes // dev.devices_per_node)
        out.append(FitVerdict(dev.name, dev.devices_per_node, per, dev.memory_bytes))
    return out


def report(
    plan: AllocationPlan,
    arch: ModelArch | None = None,
    context_len: int = DEFAULT_CONTEXT,
    overhead: RuntimeOverheadModel | None = None,
    devices: Iterable[DeviceProfile] = (),
    n_devices: int = 8,
) -> DeploymentReport:
    """Size and memory report for ``plan``.

    With ``arch`` given, the plan must list exactly the arch's tensors. The
    overhead defaults to zero when neither is given, and to the calibrated
    model of ``arch`` otherwise.
    """
    if n_devices < 1:
        raise EstimateError("n_devices must be >= 1")
    if arch is not None:
        want = {t.name: t.shape for t in arch.tensors()}
        have = {a.tensor.name: a.tensor.shape for a in plan}
        if want != have:
            missing = sorted(set(want) - set(have))[:3]
            extra = sorted(set(have) - set(want))[:3]
            raise EstimateError(f"plan does not match arch {arch.name!r} (missing {missing}, extra {extra})")
        if overhead is None:
            overhead = RuntimeOverheadModel.calibrated(arch)
    overhead = overhead or RuntimeOverheadModel()
    rows = tuple(
        TensorRow(a.tensor.name, a.tensor.role, a.tensor.layer, a.format.name, a.tensor.n_elements,
                  tensor_bytes(a.tensor, a.format))
        for a in plan
    )
    rep = DeploymentReport(
        arch=plan.arch_name,
        recipe=plan.recipe_name,
        total_params=sum(r.n_elements for r in rows),
        weight_bytes=sum(r.bytes for r in rows),
        context_len=context_len,
        overhead_bytes=overhead(context_len),
        n_devices=n_devices,
        per_tensor=rows,
    )
    devices = list(devices)
    if devices:
        rep = DeploymentReport(**{**rep.__dict__, "fits": tuple(fit_matrix(rep, devices))})
    return rep
