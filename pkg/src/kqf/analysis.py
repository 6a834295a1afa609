"""Weight-space quantization error per tensor and per recipe."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .container import ContainerFile, TensorEntry
from .kquant.codec import decode_payload, dequantize_tensor, quantize_tensor
from .kquant.formats import FormatId
from .recipes import AllocationPlan


class AnalysisError(ValueError):
    pass


class UnplannedTensorError(AnalysisError):
    def __init__(self, name: str):
        self.tensor = name
        super().__init__(f"unplanned tensor {name!r}: the plan has no assignment for it")


@dataclass(frozen=True)
class ErrorRow:
    name: str
    role: str
    layer: int | None
    format: str
    n_elements: int
    rmse: float
    max_abs_err: float
    rel_fro_err: float
    zero_norm: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def tensor_error(name, role, layer, fmt: str, ref: np.ndarray, approx: np.ndarray) -> ErrorRow:
    """Metrics of ``approx`` against ``ref`` (both any shape, same size)."""
    r = np.asarray(ref, dtype=np.float64).reshape(-1)
    diff = np.asarray(approx, dtype=np.float64).reshape(-1) - r
    n = r.size
    sse = float(np.sum(diff * diff))
    ref_sq = float(np.sum(r * r))
    zero = ref_sq == 0.0
    return ErrorRow(
        name=name,
        role=role,
        layer=layer,
        format=fmt,
        n_elements=n,
        rmse=math.sqrt(sse / n),
        max_abs_err=float(np.max(np.abs(diff))) if n else 0.0,
        rel_fro_err=0.0 if zero else math.sqrt(sse / ref_sq),
        zero_norm=zero,
    )


@dataclass(frozen=True)
class ErrorReport:
    recipe: str
    rows: tuple[ErrorRow, ...] = field(repr=False)

    @property
    def total_elements(self) -> int:
        return sum(r.n_elements for r in self.rows)

    @property
    def aggregate(self) -> float:
        """Size-weighted mean of the per-tensor relative errors."""
        n = self.total_elements
        if n == 0:
            return 0.0
        return math.fsum(r.n_elements * r.rel_fro_err for r in self.rows) / n

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": "kqf.analyze/1",
            "recipe": self.recipe,
            "aggregate_rel_err": self.aggregate,
            "total_elements": self.total_elements,
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ErrorReport":
        try:
            return cls(str(d["recipe"]), tuple(ErrorRow(**r) for r in d["rows"]))
        except (KeyError, TypeError) as e:
            raise AnalysisError(f"malformed error report: {e}") from e

    def to_text(self) -> str:
        lines = [
            f"recipe {self.recipe}: size-weighted relative error {self.aggregate:.6e}",
            "",
            f"{'tensor':<34}{'format':<8}{'rmse':>13}{'max_abs':>13}{'rel_fro':>13}",
        ]
        for r in self.rows:
            flag = "  (zero norm)" if r.zero_norm else ""
            lines.append(
                f"{r.name:<34}{r.format:<8}{r.rmse:>13.4e}{r.max_abs_err:>13.4e}{r.rel_fro_err:>13.4e}{flag}"
            )
        return "\n".join(lines)


def _source_values(t: TensorEntry) -> np.ndarray:
    if t.format.id not in (FormatId.F32, FormatId.F16):
        raise AnalysisError(f"tensor {t.name!r} is {t.format.name}; analysis needs an F16/F32 source")
    return decode_payload(t.data, t.format, t.shape)


def analyze(
    model: ContainerFile,
    plan: AllocationPlan,
    method: str = "lsq",
    progress: Callable[[int, int, str], None] | None = None,
) -> ErrorReport:
    """Quantize each source tensor per ``plan`` and measure the error.

    Tensors are processed one at a time; only one decoded copy is alive.
    """
    assigned = plan.by_name()
    rows = []
    total = len(model.tensors)
    for k, t in enumerate(model.tensors):
        a = assigned.get(t.name)
        if a is None:
            raise UnplannedTensorError(t.name)
        if tuple(a.tensor.shape) != tuple(t.shape):
            raise AnalysisError(f"tensor {t.name!r}: model shape {t.shape} != plan shape {a.tensor.shape}")
        x = _source_values(t)
        approx = dequantize_tensor(quantize_tensor(x, t.shape, a.format, method=method, role=a.tensor.role))
        rows.append(tensor_error(t.name, a.tensor.role, a.tensor.layer, a.format.name, x, approx))
        del x, approx
        if progress:
            progress(k + 1, total, t.name)
    return ErrorReport(plan.recipe_name, tuple(rows))


@dataclass(frozen=True)
class DeltaRow:
    role: str
    layer: int | None
    format_a: str
    format_b: str
    rmse_a: float
    rmse_b: float
    rel_a: float
    rel_b: float

    @property
    def delta_rmse(self) -> float:
        return self.rmse_a - self.rmse_b

    @property
    def delta_rel(self) -> float:
        return self.rel_a - self.rel_b

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta_rmse"] = self.delta_rmse
        d["delta_rel"] = self.delta_rel
        return d


@dataclass(frozen=True)
class Comparison:
    recipe_a: str
    recipe_b: str
    rows: tuple[DeltaRow, ...]
    unmatched_a: tuple[tuple[str, int | None], ...]
    unmatched_b: tuple[tuple[str, int | None], ...]
    aggregate_a: float
    aggregate_b: float

    @property
    def aggregate_delta(self) -> float:
        return self.aggregate_a - self.aggregate_b

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": "kqf.compare/1",
            "recipe_a": self.recipe_a,
            "recipe_b": self.recipe_b,
            "aggregate_a": self.aggregate_a,
            "aggregate_b": self.aggregate_b,
            "aggregate_delta": self.aggregate_delta,
            "rows": [r.to_dict() for r in self.rows],
            "unmatched_a": [{"role": r, "layer": l} for r, l in self.unmatched_a],
            "unmatched_b": [{"role": r, "layer": l} for r, l in self.unmatched_b],
        }

    def to_text(self) -> str:
        lines = [
            f"A = {self.recipe_a} (aggregate {self.aggregate_a:.6e})",
            f"B = {self.recipe_b} (aggregate {self.aggregate_b:.6e})",
            f"aggregate delta A-B {self.aggregate_delta:+.6e}",
            "",
            f"{'role':<18}{'layer':>6}  {'fmt A':<7}{'fmt B':<7}{'rmse A':>12}{'rmse B':>12}{'delta':>13}",
        ]
        for r in self.rows:
            layer = "-" if r.layer is None else str(r.layer)
            lines.append(
                f"{r.role:<18}{layer:>6}  {r.format_a:<7}{r.format_b:<7}"
                f"{r.rmse_a:>12.4e}{r.rmse_b:>12.4e}{r.delta_rmse:>+13.4e}"
            )
        for tag, um in (("A", self.unmatched_a), ("B", self.unmatched_b)):
            for role, layer in um:
                lines.append(f"unmatched in {tag}: {role} layer {'-' if layer is None else layer}")
        return "\n".join(lines)


def compare(a: ErrorReport, b: ErrorReport) -> Comparison:
    """Align two reports by ``(role, layer)``; deltas are A minus B."""

    def index(rep: ErrorReport) -> dict[tuple[str, int | None], ErrorRow]:
        out: dict[tuple[str, int | None], ErrorRow] = {}
        for r in rep.rows:
            out.setdefault((r.role, r.layer), r)
        return out

    ia, ib = index(a), index(b)
    rows = tuple(
        DeltaRow(k[0], k[1], ra.format, ib[k].format, ra.rmse, ib[k].rmse, ra.rel_fro_err, ib[k].rel_fro_err)
        for k, ra in ia.items()
        if k in ib
    )
    return Comparison(
        a.recipe,
        b.recipe,
        rows,
        tuple(k for k in ia if k not in ib),
        tuple(k for k in ib if k not in ia),
        a.aggregate,
        b.aggregate,
    )


def aggregate_of(rows: Iterable[ErrorRow]) -> float:
    return ErrorReport("", tuple(rows)).aggregate
