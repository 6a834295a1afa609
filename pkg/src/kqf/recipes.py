"""Quantization recipes and their resolution into per-tensor allocation plans."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

from .arch import ModelArch, TensorSpec
from .kquant.formats import F16, F32, Q8_0, BlockFormat, get_format, precision_rank

#: alternative spellings accepted in recipe files
ROLE_ALIASES = {
    "ffn_gate_exp": "ffn_gate_exps",
    "ffn_up_exp": "ffn_up_exps",
    "ffn_down_exp": "ffn_down_exps",
}
_RESERVED = {"name", "default", "roles", "description", "schema"}


class RecipeError(ValueError):
    pass


class UnknownRecipeError(RecipeError):
    def __init__(self, name: str):
        self.recipe = name
        known = ", ".join(builtin_recipes())
        super().__init__(f"unknown recipe {name!r} (built-ins: {known}; or give a recipe file path)")


class UnmappedRoleError(RecipeError):
    def __init__(self, role: str, recipe: str):
        self.role = role
        super().__init__(f"unmapped role {role!r}: recipe {recipe!r} has no entry and no default")


def _fmt(value: Any) -> BlockFormat:
    try:
        return get_format(value)
    except KeyError as e:
        raise RecipeError(str(e.args[0])) from None


def _desc(parts: Iterable[BlockFormat]) -> list[BlockFormat]:
    return sorted(parts, key=precision_rank, reverse=True)


@dataclass(frozen=True)
class Fixed:
    format: BlockFormat

    def to_json(self) -> Any:
        return self.format.name


@dataclass(frozen=True)
class Split:
    """Fractions of a role's layer instances per format."""

    parts: tuple[tuple[BlockFormat, float], ...]

    def __post_init__(self):
        if not self.parts:
            raise RecipeError("split entry needs at least one part")
        fmts = [f for f, _ in self.parts]
        if len(set(fmts)) != len(fmts):
            raise RecipeError("split entry lists a format twice")
        for f, frac in self.parts:
            if not 0.0 < frac <= 1.0:
                raise RecipeError(f"split fraction for {f.name} must be in (0, 1], got {frac}")
        total = sum(frac for _, frac in self.parts)
        if abs(total - 1.0) > 1e-9:
            raise RecipeError(f"split fractions sum to {total}, expected 1")

    def to_json(self) -> Any:
        return [{"format": f.name, "fraction": frac} for f, frac in self.parts]


@dataclass(frozen=True)
class Dynamic:
    """First ``head`` instances get ``head_format``; after that every
    ``stride``-th instance gets ``stride_format`` and the rest ``base_format``."""

    head: int
    head_format: BlockFormat
    stride: int
    stride_format: BlockFormat
    base_format: BlockFormat

    def __post_init__(self):
        if self.head < 0 or self.stride < 1:
            raise RecipeError(f"dynamic rule needs head >= 0 and stride >= 1, got {self.head}/{self.stride}")

    def format_at(self, j: int) -> BlockFormat:
        if j < self.head:
            return self.head_format
        if (j - self.head + 1) % self.stride == 0:
            return self.stride_format
        return self.base_format

    def to_json(self) -> Any:
        return {
            "head": self.head,
            "head_format": self.head_format.name,
            "stride": self.stride,
            "stride_format": self.stride_format.name,
            "base_format": self.base_format.name,
        }


Entry = Union[Fixed, Split, Dynamic]


def parse_entry(value: Any) -> Entry:
    if isinstance(value, (str, BlockFormat)):
        return Fixed(_fmt(value))
    if isinstance(value, (list, tuple)):
        try:
            parts = tuple((_fmt(p["format"]), float(p["fraction"])) for p in value)
        except (KeyError, TypeError) as e:
            raise RecipeError(f"split entries need 'format' and 'fraction': {value!r}") from e
        return Split(parts)
    if isinstance(value, Mapping):
        keys = {"head", "head_format", "stride", "stride_format", "base_format"}
        if set(value) != keys:
            raise RecipeError(f"dynamic rule needs exactly the keys {sorted(keys)}, got {sorted(value)}")
        return Dynamic(
            int(value["head"]),
            _fmt(value["head_format"]),
            int(value["stride"]),
            _fmt(value["stride_format"]),
            _fmt(value["base_format"]),
        )
    raise RecipeError(f"cannot parse recipe entry {value!r}")


@dataclass(frozen=True)
class QuantRecipe:
    name: str
    default: BlockFormat | None
    entries: Mapping[str, Entry] = field(default_factory=dict)
    description: str = ""

    def entry_for(self, role: str) -> Entry | None:
        e = self.entries.get(role)
        if e is None and self.default is not None:
            return Fixed(self.default)
        return e

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name}
        if self.description:
            d["description"] = self.description
        d["default"] = self.default.name if self.default else None
        d["roles"] = {r: e.to_json() for r, e in self.entries.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuantRecipe":
        if "name" not in d:
            raise RecipeError("recipe needs a 'name'")
        raw = dict(d.get("roles", {}))
        raw.update({k: v for k, v in d.items() if k not in _RESERVED})
        entries = {}
        for role, v in raw.items():
            role = ROLE_ALIASES.get(role, role)
            if role in entries:
                raise RecipeError(f"role {role!r} given twice")
            entries[role] = parse_entry(v)
        default = d.get("default")
        return cls(str(d["name"]), _fmt(default) if default else None, entries, str(d.get("description", "")))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "QuantRecipe":
        path = Path(path)
        text = path.read_text()
        try:
            if path.suffix.lower() == ".toml":
                try:
                    import tomllib
                except ModuleNotFoundError:  # Python < 3.11
                    import tomli as tomllib
                data = tomllib.loads(text)
            else:
                data = json.loads(text)
        except ValueError as e:
            raise RecipeError(f"{path}: {e}") from e
        return cls.from_dict(data)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _r(name: str, default: str, table: dict[str, Any], description: str) -> QuantRecipe:
    return QuantRecipe(name, get_format(default), {k: parse_entry(v) for k, v in table.items()}, description)


def _s(*parts: tuple[str, float]) -> list[dict]:
    return [{"format": f, "fraction": p} for f, p in parts]


def builtin_recipes() -> dict[str, QuantRecipe]:
    """The five reference recipes, keyed by name."""
    q2, q3, q4, q6 = "q2_k", "q3_k", "q4_k", "q6_k"
    rows = (
        "output token_embd attn_kv_a_mqa attn_kv_b attn_output attn_q_a attn_q_b ffn_down ffn_gate ffn_up "
        "ffn_down_exps ffn_down_shexp ffn_gate_exps ffn_gate_shexp ffn_up_exps ffn_up_shexp"
    ).split()
    q4_down = _s((q4, 0.534), (q6, 0.466))
    cols = {
        "Q4_K_M": (q4, [q6, q4, q4, q4, q4, q4, q4, q6, q4, q4, q4_down, q4_down, q4, q4, q4, q4]),
        "Q3_K_M": (q3, [q6, q3, q3, q3, q4, q3, q3, "q5_k", q3, q3, q4, q4, q3, q3, q3, q3]),
        "DQ3_K_M": (q3, [q6, q4, q6, q6, q4, q4, q4, q6, q4, q4, _s((q3, 0.759), (q4, 0.207), (q6, 0.034)),
                         q6, q3, q4, q3, q4]),
        "Q2_K_L": (q2, [q6, q4, q6, q2, q3, q2, q2, q3, q2, q2, q3, q3, q2, q2, q2, q2]),
        "Q2_K_XL": (q2, [q6, q4, q6, q6, q4, q4, q4, q6, q4, q4, _s((q2, 0.948), (q3, 0.052)),
                         q6, q2, q4, q2, q4]),
    }
    notes = {
        "Q4_K_M": "4-bit mixed recipe; ffn_down_exps/shexp split between q4_k and q6_k",
        "Q3_K_M": "3-bit mixed recipe",
        "DQ3_K_M": "dynamic 3-bit recipe: ffn_down_exps q6_k on the first MoE layers, q4_k spread through q3_k",
        "Q2_K_L": "2-bit recipe with 3-bit down projections",
        "Q2_K_XL": "2-bit routed experts with a small q3_k share, 4/6-bit elsewhere",
    }
    return {name: _r(name, default, dict(zip(rows, cells)), notes[name]) for name, (default, cells) in cols.items()}


_NAME_ALIASES = {"UD-Q2_K_XL": "Q2_K_XL"}


def get_recipe(name_or_path: str | os.PathLike) -> QuantRecipe:
    """Resolve a built-in name (case-insensitive) or a recipe file path."""
    builtins = builtin_recipes()
    key = str(name_or_path).upper()
    key = _NAME_ALIASES.get(key, key)
    for name, r in builtins.items():
        if name.upper() == key:
            return r
    p = Path(name_or_path)
    if p.suffix.lower() in (".json", ".toml") or p.exists():
        if not p.is_file():
            raise RecipeError(f"recipe file not found: {p}")
        return QuantRecipe.load(p)
    raise UnknownRecipeError(str(name_or_path))


def split_to_counts(fractions: Sequence[tuple[Any, float]], n: int) -> list[tuple[BlockFormat, int]]:
    """Largest-remainder apportionment of ``n`` instances.

    Returned highest precision first. Exact rational arithmetic on the decimal
    fractions, so ties are real ties and go to the more precise format.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    parts = [(_fmt(f), Fraction(str(p))) for f, p in fractions]
    Split(tuple((f, float(p)) for f, p in parts))  # validates
    total = sum(p for _, p in parts)
    quotas = [(f, p * n / total) for f, p in parts]
    counts = {f: int(q) for f, q in quotas}
    left = n - sum(counts.values())
    order = sorted(quotas, key=lambda fq: (fq[1] - int(fq[1]), precision_rank(fq[0])), reverse=True)
    for f, _ in order[:left]:
        counts[f] += 1
    return [(f, counts[f]) for f in _desc(counts)]


def place_split(counts: Sequence[tuple[BlockFormat, int]], n: int) -> list[BlockFormat]:
    """Formats for instances ``0..n-1``.

    The most precise format takes the lowest indices, intermediate formats are
    spread at ``floor(j * n_rem / count)`` over what is left, the least precise
    format fills the remainder.
    """
    live = [(f, c) for f, c in counts if c > 0]
    if sum(c for _, c in live) != n:
        raise ValueError("counts must sum to n")
    out: list[BlockFormat | None] = [None] * n
    remaining = list(range(n))
    for k, (f, c) in enumerate(live):
        if k == 0:
            picks = remaining[:c]
        elif k == len(live) - 1:
            picks = list(remaining)
        else:
            m = len(remaining)
            picks = [remaining[j * m // c] for j in range(c)]
        for i in picks:
            out[i] = f
        taken = set(picks)
        remaining = [i for i in remaining if i not in taken]
    return out  # type: ignore[return-value]


def fallback_format(row_len: int) -> BlockFormat:
    return Q8_0 if row_len % Q8_0.block_len == 0 else F16


@dataclass(frozen=True)
class Assignment:
    tensor: TensorSpec
    format: BlockFormat
    fallback_applied: bool = False
    requested: BlockFormat | None = None

    def to_dict(self) -> dict:
        d = self.tensor.to_dict()
        d["format"] = self.format.name
        d["fallback_applied"] = self.fallback_applied
        if self.fallback_applied and self.requested is not None:
            d["requested"] = self.requested.name
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Assignment":
        fmt = _fmt(d["format"])
        req = d.get("requested")
        return cls(TensorSpec.from_dict(d), fmt, bool(d.get("fallback_applied", False)), _fmt(req) if req else fmt)


@dataclass(frozen=True)
class AllocationPlan:
    arch_name: str
    recipe_name: str
    assignments: tuple[Assignment, ...]

    def __iter__(self) -> Iterator[Assignment]:
        return iter(self.assignments)

    def __len__(self) -> int:
        return len(self.assignments)

    def by_name(self) -> dict[str, Assignment]:
        return {a.tensor.name: a for a in self.assignments}

    def format_of(self, name: str) -> BlockFormat:
        return self.by_name()[name].format

    def format_counts(self, role: str | None = None) -> dict[str, int]:
        c = Counter(a.format.name for a in self.assignments if role is None or a.tensor.role == role)
        return {f.name: c[f.name] for f in _desc(get_format(k) for k in c)}

    @property
    def total_params(self) -> int:
        return sum(a.tensor.n_elements for a in self.assignments)

    def to_dict(self) -> dict:
        return {
            "schema": "kqf.plan/1",
            "arch": self.arch_name,
            "recipe": self.recipe_name,
            "total_params": self.total_params,
            "tensors": [a.to_dict() for a in self.assignments],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AllocationPlan":
        try:
            items = tuple(Assignment.from_dict(t) for t in d["tensors"])
            plan = cls(str(d["arch"]), str(d["recipe"]), items)
        except (KeyError, TypeError) as e:
            raise RecipeError(f"malformed plan document: missing {e}") from e
        names = [a.tensor.name for a in items]
        if len(set(names)) != len(names):
            raise RecipeError("plan lists a tensor twice")
        return plan


def plan_allocation(arch: ModelArch, recipe: QuantRecipe) -> AllocationPlan:
    tensors = arch.tensors()
    instances: dict[str, list[int]] = {}
    for k, t in enumerate(tensors):
        instances.setdefault(t.role, []).append(k)

    chosen: dict[int, BlockFormat] = {}
    for role, idxs in instances.items():
        if role in arch.unquantized_roles or all(len(tensors[k].shape) == 1 for k in idxs):
            for k in idxs:
                chosen[k] = F32
            continue
        entry = recipe.entry_for(role)
        if entry is None:
            raise UnmappedRoleError(role, recipe.name)
        n = len(idxs)
        if isinstance(entry, Fixed):
            fmts = [entry.format] * n
        elif isinstance(entry, Split):
            fmts = place_split(split_to_counts(entry.parts, n), n)
        else:
            fmts = [entry.format_at(j) for j in range(n)]
        for k, f in zip(idxs, fmts):
            chosen[k] = f

    out = []
    for k, t in enumerate(tensors):
        want = F32 if len(t.shape) == 1 else chosen[k]
        if want.block_len > 1 and t.row_len % want.block_len:
            out.append(Assignment(t, fallback_format(t.row_len), True, want))
        else:
            out.append(Assignment(t, want, False, want))
    return AllocationPlan(arch.name, recipe.name, tuple(out))
