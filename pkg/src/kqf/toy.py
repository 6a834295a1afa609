"""Seeded miniature MoE models for offline, reproducible experiments."""

from __future__ import annotations

import numpy as np

from .arch import ModelArch
from .container import ContainerFile

TOY_ARCH = {
    "name": "toy-moe",
    "n_layers": 5,
    "n_dense_layers": 1,
    "hidden_dim": 256,
    "dense_ffn_dim": 512,
    "expert_ffn_dim": 256,
    "n_routed_experts": 4,
    "n_shared_experts": 1,
    "vocab_size": 512,
    "q_lora_rank": 256,
    "kv_lora_rank": 256,
    "rope_head_dim": 64,
    "n_heads": 2,
    "qk_nope_head_dim": 128,
    "v_head_dim": 128,
}


def toy_arch(**overrides) -> ModelArch:
    return ModelArch.from_dict({**TOY_ARCH, **overrides})


def make_toy_model(seed: int, arch: ModelArch | None = None, dtype: str = "f32", zero: bool = False) -> ContainerFile:
    """F32/F16 container with one tensor per ``arch`` weight.

    Matrices are N(0, 1/row_len), vectors are ones. Each tensor draws from
    its own stream seeded by ``(seed, index)``, so adding tensors never
    perturbs the others.
    """
    arch = arch or toy_arch()
    np_dtype = {"f32": "<f4", "f16": "<f2"}[dtype]
    c = ContainerFile()
    c.set("general.architecture", "kqf-toy")
    c.set("general.name", arch.name)
    c.set("kqf.toy.seed", int(seed))
    for k, t in enumerate(arch.tensors()):
        if zero:
            x = np.zeros(t.shape)
        elif len(t.shape) == 1:
            x = np.ones(t.shape)
        else:
            rng = np.random.default_rng([seed, k])
            x = rng.standard_normal(t.shape) / np.sqrt(t.row_len)
        c.add_tensor(t.name, t.shape, dtype, x.astype(np_dtype).tobytes())
    return c
