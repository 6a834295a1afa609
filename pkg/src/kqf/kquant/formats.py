"""Block format descriptors for the supported k-quant codecs."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

QK_K = 256
QK8_0 = 32


class FormatId(str, enum.Enum):
    Q2_K = "q2_k"
    Q3_K = "q3_k"
    Q4_K = "q4_k"
    Q5_K = "q5_k"
    Q6_K = "q6_k"
    Q8_0 = "q8_0"
    F16 = "f16"
    F32 = "f32"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class BlockFormat:
    """Immutable geometry of one block codec.

    ``quant_min``/``quant_max`` give the range of the per-element integers as
    they enter the reconstruction rule (centered for symmetric formats), and
    ``scale_min``/``scale_max`` the range of the per-sub-block integer scales.
    """

    id: FormatId
    block_len: int
    block_bytes: int
    sub_block_len: int | None = None
    quant_bits: int | None = None
    asymmetric: bool = False
    quant_min: int = 0
    quant_max: int = 0
    scale_min: int = 0
    scale_max: int = 0

    @property
    def name(self) -> str:
        return self.id.value

    @property
    def bits_per_weight(self) -> float:
        return self.block_bytes * 8 / self.block_len

    @property
    def bpw_exact(self) -> Fraction:
        return Fraction(self.block_bytes * 8, self.block_len)

    @property
    def n_sub_blocks(self) -> int:
        if self.sub_block_len is None:
            return 1
        return self.block_len // self.sub_block_len

    @property
    def is_kquant(self) -> bool:
        return self.block_len == QK_K

    @property
    def is_quantized(self) -> bool:
        return self.id not in (FormatId.F16, FormatId.F32)

    @property
    def levels(self) -> int:
        """Number of quantization steps spanned by one sub-block scale."""
        return self.quant_max - self.quant_min

    def __str__(self) -> str:
        return self.name


Q2_K = BlockFormat(FormatId.Q2_K, QK_K, 84, 16, 2, True, 0, 3, 0, 15)
Q3_K = BlockFormat(FormatId.Q3_K, QK_K, 110, 16, 3, False, -4, 3, -32, 31)
Q4_K = BlockFormat(FormatId.Q4_K, QK_K, 144, 32, 4, True, 0, 15, 0, 63)
Q5_K = BlockFormat(FormatId.Q5_K, QK_K, 176, 32, 5, True, 0, 31, 0, 63)
Q6_K = BlockFormat(FormatId.Q6_K, QK_K, 210, 16, 6, False, -32, 31, -128, 127)
Q8_0 = BlockFormat(FormatId.Q8_0, QK8_0, 34, QK8_0, 8, False, -128, 127, 1, 1)
F16 = BlockFormat(FormatId.F16, 1, 2)
F32 = BlockFormat(FormatId.F32, 1, 4)

FORMATS: dict[FormatId, BlockFormat] = {
    f.id: f for f in (Q2_K, Q3_K, Q4_K, Q5_K, Q6_K, Q8_0, F16, F32)
}

# Formats ordered from lowest to highest precision.
PRECISION_ORDER: tuple[FormatId, ...] = (
    FormatId.Q2_K,
    FormatId.Q3_K,
    FormatId.Q4_K,
    FormatId.Q5_K,
    FormatId.Q6_K,
    FormatId.Q8_0,
    FormatId.F16,
    FormatId.F32,
)


def get_format(fmt: str | FormatId | BlockFormat) -> BlockFormat:
    """Look up a format by id, name (case-insensitive) or descriptor."""
    if isinstance(fmt, BlockFormat):
        return fmt
    if isinstance(fmt, FormatId):
        return FORMATS[fmt]
    try:
        return FORMATS[FormatId(str(fmt).lower())]
    except ValueError:
        raise KeyError(f"unknown block format {fmt!r}") from None


def precision_rank(fmt: str | FormatId | BlockFormat) -> int:
    return PRECISION_ORDER.index(get_format(fmt).id)
