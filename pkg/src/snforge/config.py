"""Architecture records: the supernet's maximal dims and sub-network choices."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Any

from .errors import ValidationError


@dataclass(frozen=True)
class SupernetConfig:
    """Maximal dimensions of the teacher transformer.

    ``n_query_groups`` equal to ``n_head`` is multi-head attention, 1 is
    multi-query, anything in between is grouped-query.
    """

    n_layer: int
    n_embd: int
    n_head: int
    head_size: int
    intermediate_size: int
    n_query_groups: int | None = None
    vocab_size: int = 256
    max_seq: int = 64

    def __post_init__(self):
        if self.n_query_groups is None:
            object.__setattr__(self, "n_query_groups", self.n_head)
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 1:
                raise ValidationError(f"SupernetConfig.{f.name} must be >= 1, got {v}")
        if self.n_head % self.n_query_groups:
            raise ValidationError(
                f"n_head={self.n_head} is not divisible by n_query_groups={self.n_query_groups}")

    @property
    def heads_per_group(self) -> int:
        return self.n_head // self.n_query_groups

    @property
    def attention_variant(self) -> str:
        if self.n_query_groups == self.n_head:
            return "mha"
        if self.n_query_groups == 1:
            return "mqa"
        return "gqa"

    def full_subnet(self) -> "SubnetworkConfig":
        L = self.n_layer
        return SubnetworkConfig(
            l=L, e=self.n_embd, h=[self.n_head] * L, h_s=[self.head_size] * L,
            d=[self.intermediate_size] * L, q=[self.n_query_groups] * L)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SupernetConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


INDEX_FIELDS = ("layer_indices", "embd_indices", "head_indices", "head_size_indices",
                "intermediate_indices", "query_group_indices")
PER_LAYER = ("h", "h_s", "d", "q")


@dataclass
class SubnetworkConfig:
    """One point of a search space.

    Per-layer lists (``h``, ``h_s``, ``d``, ``q``) have length ``l``; entry
    ``i`` describes the ``i``-th active layer. Index sets are ``None`` for
    coarse configs (first-n selection). Fine-grained configs carry explicit
    indices in selection order: ``embd_indices`` and ``layer_indices`` are
    flat lists, the others are per active layer. ``head_indices`` holds
    absolute query-head ids, every one inside a selected query group.
    """

    l: int
    e: int
    h: list[int]
    h_s: list[int]
    d: list[int]
    q: list[int]
    layer_indices: list[int] | None = None
    embd_indices: list[int] | None = None
    head_indices: list[list[int]] | None = None
    head_size_indices: list[list[int]] | None = None
    intermediate_indices: list[list[int]] | None = None
    query_group_indices: list[list[int]] | None = None

    @property
    def fine_grained(self) -> bool:
        return any(getattr(self, f) is not None for f in INDEX_FIELDS)

    def is_uniform(self) -> bool:
        return all(len(set(getattr(self, k))) <= 1 for k in PER_LAYER)

    def copy(self) -> "SubnetworkConfig":
        return SubnetworkConfig.from_dict(self.to_dict())

    def to_dict(self) -> dict[str, Any]:
        d = {"l": self.l, "e": self.e}
        for k in PER_LAYER:
            d[k] = list(getattr(self, k))
        for k in INDEX_FIELDS:
            v = getattr(self, k)
            if v is not None:
                d[k] = [list(x) for x in v] if v and isinstance(v[0], list) else list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SubnetworkConfig":
        l = int(d["l"])

        def per_layer(key):
            v = d[key]
            return [int(x) for x in v] if isinstance(v, list) else [int(v)] * l

        kw = {k: (None if d.get(k) is None else d[k]) for k in INDEX_FIELDS}
        for k in ("layer_indices", "embd_indices"):
            if kw[k] is not None:
                kw[k] = [int(x) for x in kw[k]]
        for k in ("head_indices", "head_size_indices", "intermediate_indices", "query_group_indices"):
            if kw[k] is not None:
                kw[k] = [[int(x) for x in row] for row in kw[k]]
        return cls(l=l, e=int(d["e"]), h=per_layer("h"), h_s=per_layer("h_s"),
                   d=per_layer("d"), q=per_layer("q"), **kw)

    def key(self) -> str:
        """Canonical string used for caching and de-duplication."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SubnetworkConfig":
        return cls.from_dict(json.loads(text))

    def validate(self, sup: SupernetConfig) -> None:
        problems = subnet_violations(self, sup)
        if problems:
            raise ValidationError("; ".join(problems))


def valid_query_groups(h: int, sup: SupernetConfig) -> list[int]:
    """Query-group counts usable with ``h`` active heads on this supernet."""
    G = sup.heads_per_group
    return [q for q in range(1, min(h, sup.n_query_groups) + 1) if h % q == 0 and h // q <= G]


def _check_index_list(name, idx, size, bound, out):
    if len(idx) != size:
        out.append(f"{name}: {len(idx)} indices but dimension is {size}")
    if len(set(idx)) != len(idx):
        out.append(f"{name}: indices are not distinct")
    if any(i < 0 or i >= bound for i in idx):
        out.append(f"{name}: index outside [0, {bound})")


def subnet_violations(cfg: SubnetworkConfig, sup: SupernetConfig) -> list[str]:
    """Bounds and consistency checks against the supernet; empty means valid."""
    out: list[str] = []
    if not 1 <= cfg.l <= sup.n_layer:
        out.append(f"l={cfg.l} outside [1, {sup.n_layer}]")
    if not 1 <= cfg.e <= sup.n_embd:
        out.append(f"e={cfg.e} outside [1, {sup.n_embd}]")
    for k in PER_LAYER:
        if len(getattr(cfg, k)) != cfg.l:
            out.append(f"{k}: {len(getattr(cfg, k))} entries for l={cfg.l} layers")
    if out:
        return out
    bounds = {"h": sup.n_head, "h_s": sup.head_size, "d": sup.intermediate_size, "q": sup.n_query_groups}
    for k, hi in bounds.items():
        for i, v in enumerate(getattr(cfg, k)):
            if not 1 <= v <= hi:
                out.append(f"{k}[{i}]={v} outside [1, {hi}]")
    for i, (h, q) in enumerate(zip(cfg.h, cfg.q)):
        if 1 <= q and h % q:
            out.append(f"h[{i}]={h} not divisible by q[{i}]={q}")
        elif q >= 1 and h // q > sup.heads_per_group:
            out.append(f"h[{i}]/q[{i}]={h // q} exceeds {sup.heads_per_group} heads per query group")
    if out or not cfg.fine_grained:
        return out
    missing = [k for k in INDEX_FIELDS if getattr(cfg, k) is None]
    if missing:
        out.append("index sets partially present, missing " + ", ".join(missing))
        return out
    _check_index_list("layer_indices", cfg.layer_indices, cfg.l, sup.n_layer, out)
    _check_index_list("embd_indices", cfg.embd_indices, cfg.e, sup.n_embd, out)
    per_layer_sets = {
        "head_size_indices": (cfg.h_s, sup.head_size),
        "intermediate_indices": (cfg.d, sup.intermediate_size),
        "query_group_indices": (cfg.q, sup.n_query_groups),
        "head_indices": (cfg.h, sup.n_head),
    }
    for name, (sizes, bound) in per_layer_sets.items():
        rows = getattr(cfg, name)
        if len(rows) != cfg.l:
            out.append(f"{name}: {len(rows)} rows for l={cfg.l} layers")
            continue
        for i, row in enumerate(rows):
            _check_index_list(f"{name}[{i}]", row, sizes[i], bound, out)
    if out:
        return out
    G = sup.heads_per_group
    for i in range(cfg.l):
        groups = set(cfg.query_group_indices[i])
        per_group: dict[int, int] = {}
        for hd in cfg.head_indices[i]:
            per_group[hd // G] = per_group.get(hd // G, 0) + 1
        if set(per_group) - groups:
            out.append(f"head_indices[{i}]: heads outside the selected query groups")
        elif any(per_group.get(g, 0) != cfg.h[i] // cfg.q[i] for g in groups):
            out.append(f"head_indices[{i}]: each group needs exactly {cfg.h[i] // cfg.q[i]} heads")
    return out


@dataclass(frozen=True)
class LayerArch:
    n_head: int
    n_query_groups: int
    head_size: int
    intermediate_size: int


@dataclass(frozen=True)
class DenseArch:
    """Architecture of a dense model; layers may differ in width."""

    n_embd: int
    layers: tuple[LayerArch, ...]
    vocab_size: int
    max_seq: int

    def to_dict(self) -> dict[str, Any]:
        return {"n_embd": self.n_embd, "vocab_size": self.vocab_size, "max_seq": self.max_seq,
                "layers": [asdict(la) for la in self.layers]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DenseArch":
        return cls(n_embd=int(d["n_embd"]), vocab_size=int(d["vocab_size"]), max_seq=int(d["max_seq"]),
                   layers=tuple(LayerArch(**la) for la in d["layers"]))

    @classmethod
    def from_supernet(cls, sup: SupernetConfig) -> "DenseArch":
        la = LayerArch(sup.n_head, sup.n_query_groups, sup.head_size, sup.intermediate_size)
        return cls(sup.n_embd, (la,) * sup.n_layer, sup.vocab_size, sup.max_seq)


@dataclass
class ParamBin:
    lower: int
    upper: int

    def __post_init__(self):
        if not 0 < self.lower <= self.upper:
            raise ValidationError(f"invalid bin [{self.lower}, {self.upper}]")

    def __contains__(self, n: int) -> bool:
        return self.lower <= n <= self.upper

    def label(self) -> str:
        return f"{self.lower}-{self.upper}"

