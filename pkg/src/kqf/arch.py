"""Model architecture description and weight-tensor enumeration.

Tensor names follow GGUF conventions (``blk.{i}.{role}.weight``); shapes are
row-major ``(out, in)`` so the last dimension is the quantization row.
"""

from __future__ import annotations

import json
import os
from dataclasses import MISSING, dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Any, Iterator, Mapping

ATTN_ROLES = ("attn_q_a", "attn_q_b", "attn_kv_a_mqa", "attn_kv_b", "attn_output")
DENSE_FFN_ROLES = ("ffn_gate", "ffn_up", "ffn_down")
EXPERT_ROLES = ("ffn_gate_exps", "ffn_up_exps", "ffn_down_exps")
SHARED_ROLES = ("ffn_gate_shexp", "ffn_up_shexp", "ffn_down_shexp")
GLOBAL_ROLES = ("token_embd", "output")

#: roles a recipe may name (the per-matrix rows of a recipe table)
MATRIX_ROLES = GLOBAL_ROLES + ATTN_ROLES + DENSE_FFN_ROLES + EXPERT_ROLES + SHARED_ROLES

# Hugging Face config.json key -> ModelArch field
_HF_KEYS = {
    "hidden_size": "hidden_dim",
    "num_hidden_layers": "n_layers",
    "first_k_dense_replace": "n_dense_layers",
    "intermediate_size": "dense_ffn_dim",
    "moe_intermediate_size": "expert_ffn_dim",
    "n_routed_experts": "n_routed_experts",
    "n_shared_experts": "n_shared_experts",
    "vocab_size": "vocab_size",
    "q_lora_rank": "q_lora_rank",
    "kv_lora_rank": "kv_lora_rank",
    "qk_rope_head_dim": "rope_head_dim",
    "num_attention_heads": "n_heads",
    "qk_nope_head_dim": "qk_nope_head_dim",
    "v_head_dim": "v_head_dim",
}


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class TensorSpec:
    name: str
    role: str
    layer: int | None
    shape: tuple[int, ...]
    kind: str  # global | norm | attention | dense | moe | shared_expert | router

    @property
    def n_elements(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n

    @property
    def row_len(self) -> int:
        return self.shape[-1]

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role, "layer": self.layer, "shape": list(self.shape), "kind": self.kind}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TensorSpec":
        return cls(d["name"], d["role"], d["layer"], tuple(int(s) for s in d["shape"]), d["kind"])


@dataclass(frozen=True)
class ModelArch:
    """A DeepSeek-style MLA + MoE decoder.

    The first ``n_dense_layers`` blocks use a dense FFN, the rest route over
    ``n_routed_experts`` experts plus ``n_shared_experts`` always-on experts.
    ``shape_overrides`` replaces the derived shape of a role (useful for
    toy architectures); ``unquantized_roles`` are kept at F32 by the planner.
    """

    name: str
    n_layers: int
    n_dense_layers: int
    hidden_dim: int
    dense_ffn_dim: int
    expert_ffn_dim: int
    n_routed_experts: int
    n_shared_experts: int
    vocab_size: int
    q_lora_rank: int
    kv_lora_rank: int
    rope_head_dim: int
    n_heads: int
    qk_nope_head_dim: int
    v_head_dim: int
    unquantized_roles: tuple[str, ...] = ("ffn_gate_inp",)
    shape_overrides: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    source: str | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (not isinstance(v, int) or v < 0):
                raise ArchError(f"{f.name} must be a non-negative integer, got {v!r}")
        if self.n_layers < 1 or self.hidden_dim < 1 or self.vocab_size < 1 or self.n_heads < 1:
            raise ArchError("n_layers, hidden_dim, vocab_size and n_heads must be positive")
        if self.n_dense_layers > self.n_layers:
            raise ArchError(f"n_dense_layers ({self.n_dense_layers}) exceeds n_layers ({self.n_layers})")
        if self.n_moe_layers and self.n_routed_experts < 1:
            raise ArchError("MoE layers need n_routed_experts >= 1")
        object.__setattr__(self, "unquantized_roles", tuple(self.unquantized_roles))
        overrides = {k: tuple(int(s) for s in v) for k, v in dict(self.shape_overrides).items()}
        for k, v in overrides.items():
            if not v or any(s < 1 for s in v):
                raise ArchError(f"shape override for {k} is invalid: {v}")
        object.__setattr__(self, "shape_overrides", overrides)

    @property
    def n_moe_layers(self) -> int:
        return self.n_layers - self.n_dense_layers

    def is_moe_layer(self, i: int) -> bool:
        return i >= self.n_dense_layers

    def _shape(self, role: str, default: tuple[int, ...]) -> tuple[int, ...]:
        return self.shape_overrides.get(role, default)

    def _layer(self, i: int) -> Iterator[TensorSpec]:
        h = self.hidden_dim
        qk_head = self.qk_nope_head_dim + self.rope_head_dim

        def t(role, shape, kind, suffix="weight"):
            shape = self._shape(role, shape)
            return TensorSpec(f"blk.{i}.{role}.{suffix}", role, i, shape, kind)

        yield t("attn_norm", (h,), "norm")
        if self.q_lora_rank:
            yield t("attn_q_a_norm", (self.q_lora_rank,), "norm")
        yield t("attn_kv_a_norm", (self.kv_lora_rank,), "norm")
        if self.q_lora_rank:
            yield t("attn_q_a", (self.q_lora_rank, h), "attention")
            yield t("attn_q_b", (self.n_heads * qk_head, self.q_lora_rank), "attention")
        else:
            yield t("attn_q", (self.n_heads * qk_head, h), "attention")
        yield t("attn_kv_a_mqa", (self.kv_lora_rank + self.rope_head_dim, h), "attention")
        yield t("attn_kv_b", (self.n_heads * (self.qk_nope_head_dim + self.v_head_dim), self.kv_lora_rank), "attention")
        yield t("attn_output", (h, self.n_heads * self.v_head_dim), "attention")
        yield t("ffn_norm", (h,), "norm")
        if not self.is_moe_layer(i):
            f = self.dense_ffn_dim
            yield t("ffn_gate", (f, h), "dense")
            yield t("ffn_up", (f, h), "dense")
            yield t("ffn_down", (h, f), "dense")
            return
        e, f = self.n_routed_experts, self.expert_ffn_dim
        yield t("ffn_gate_inp", (e, h), "router")
        yield t("exp_probs_b", (e,), "router", suffix="bias")
        yield t("ffn_gate_exps", (e, f, h), "moe")
        yield t("ffn_up_exps", (e, f, h), "moe")
        yield t("ffn_down_exps", (e, h, f), "moe")
        if self.n_shared_experts:
            fs = f * self.n_shared_experts
            yield t("ffn_gate_shexp", (fs, h), "shared_expert")
            yield t("ffn_up_shexp", (fs, h), "shared_expert")
            yield t("ffn_down_shexp", (h, fs), "shared_expert")

    @cached_property
    def _tensors(self) -> tuple[TensorSpec, ...]:
        h = self.hidden_dim
        out = [TensorSpec("token_embd.weight", "token_embd", None, self._shape("token_embd", (self.vocab_size, h)), "global")]
        for i in range(self.n_layers):
            out.extend(self._layer(i))
        out.append(TensorSpec("output_norm.weight", "output_norm", None, self._shape("output_norm", (h,)), "norm"))
        out.append(TensorSpec("output.weight", "output", None, self._shape("output", (self.vocab_size, h)), "global"))
        return tuple(out)

    def tensors(self) -> tuple[TensorSpec, ...]:
        """Every weight tensor, in container order."""
        return self._tensors

    def roles(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self._tensors:
            seen.setdefault(t.role, None)
        return list(seen)

    @property
    def total_params(self) -> int:
        return sum(t.n_elements for t in self._tensors)

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["unquantized_roles"] = list(self.unquantized_roles)
        d["shape_overrides"] = {k: list(v) for k, v in self.shape_overrides.items()}
        if d["source"] is None:
            del d["source"]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelArch":
        d = dict(d)
        if "hidden_size" in d:  # Hugging Face style config.json
            d = _from_hf(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known - {"$comment", "comment", "schema"})
        if unknown:
            raise ArchError(f"unknown architecture keys: {', '.join(unknown)}")
        missing = sorted(
            f.name for f in fields(cls) if f.name not in d and f.default is MISSING and f.default_factory is MISSING
        )
        if missing:
            raise ArchError(f"missing architecture keys: {', '.join(missing)}")
        return cls(**{k: (tuple(v) if k == "unquantized_roles" else v) for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelArch":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ArchError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _from_hf(cfg: Mapping[str, Any]) -> dict[str, Any]:
    d = {ours: cfg[theirs] for theirs, ours in _HF_KEYS.items() if theirs in cfg}
    d["name"] = cfg.get("name") or cfg.get("model_type", "hf-model")
    if d.get("q_lora_rank") is None:
        d["q_lora_rank"] = 0
    d.setdefault("n_shared_experts", 0)
    return d
