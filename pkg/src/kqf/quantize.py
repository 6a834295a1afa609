"""Whole-model quantization: F16/F32 container in, quantized container out."""

from __future__ import annotations

from typing import Callable

from .analysis import AnalysisError, UnplannedTensorError, _source_values
from .container import ContainerFile, MetaValue
from .kquant.codec import quantize_tensor
from .recipes import AllocationPlan


def quantize_model(
    src: ContainerFile,
    plan: AllocationPlan,
    method: str = "lsq",
    progress: Callable[[int, int, str], None] | None = None,
) -> ContainerFile:
    """Encode every tensor of ``src`` in its planned format.

    Metadata is carried over unchanged, plus ``kqf.recipe`` and
    ``kqf.method``. Output is deterministic for fixed inputs.
    """
    assigned = plan.by_name()
    out = ContainerFile(metadata=dict(src.metadata))
    out.metadata["kqf.recipe"] = MetaValue.infer(plan.recipe_name)
    out.metadata["kqf.method"] = MetaValue.infer(method)
    total = len(src.tensors)
    for k, t in enumerate(src.tensors):
        a = assigned.get(t.name)
        if a is None:
            raise UnplannedTensorError(t.name)
        if tuple(a.tensor.shape) != tuple(t.shape):
            raise AnalysisError(f"tensor {t.name!r}: model shape {t.shape} != plan shape {a.tensor.shape}")
        if a.format == t.format:
            payload = bytes(t.data)
        else:
            qt = quantize_tensor(_source_values(t), t.shape, a.format, method=method, role=a.tensor.role)
            payload = qt.payload
        out.add_tensor(t.name, t.shape, a.format, payload)
        if progress:
            progress(k + 1, total, t.name)
    return out
