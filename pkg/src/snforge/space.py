"""The four search spaces: coarse/fine-grained x uniform/layer-wise."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import INDEX_FIELDS, PER_LAYER, SubnetworkConfig, SupernetConfig, subnet_violations
from .errors import FormatError, ValidationError

COARSE, FINE = "coarse", "fine"
UNIFORM, LAYERWISE = "uniform", "layerwise"
DIMS = ("l", "e", "h", "h_s", "d", "q")


@dataclass(frozen=True)
class SearchSpace:
    granularity: str = COARSE
    layering: str = UNIFORM
    choices: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.granularity not in (COARSE, FINE):
            raise ValidationError(f"granularity must be 'coarse' or 'fine', got {self.granularity!r}")
        if self.layering not in (UNIFORM, LAYERWISE):
            raise ValidationError(f"layering must be 'uniform' or 'layerwise', got {self.layering!r}")
        clean = {}
        for k, v in self.choices.items():
            if k not in DIMS:
                raise ValidationError(f"unknown dimension {k!r}")
            vals = tuple(sorted({int(x) for x in v}))
            if not vals:
                raise ValidationError(f"choice set for {k} is empty")
            clean[k] = vals
        object.__setattr__(self, "choices", clean)

    @property
    def fine_grained(self) -> bool:
        return self.granularity == FINE

    @property
    def layerwise(self) -> bool:
        return self.layering == LAYERWISE

    @property
    def name(self) -> str:
        return f"{self.granularity}-{self.layering}"

    def resolved(self, sup: SupernetConfig) -> "SearchSpace":
        """Fill missing choice sets with the full range and check bounds."""
        bounds = {"l": sup.n_layer, "e": sup.n_embd, "h": sup.n_head, "h_s": sup.head_size,
                  "d": sup.intermediate_size, "q": sup.n_query_groups}
        ch = {}
        for k, hi in bounds.items():
            vals = self.choices.get(k, tuple(range(1, hi + 1)))
            bad = [v for v in vals if not 1 <= v <= hi]
            if bad:
                raise ValidationError(f"choices for {k} outside [1, {hi}]: {bad}")
            ch[k] = vals
        if not head_query_pairs(ch, sup):
            raise ValidationError("no (h, q) choice pair is valid for this supernet")
        return SearchSpace(self.granularity, self.layering, ch)

    def to_dict(self) -> dict:
        return {"granularity": self.granularity, "layering": self.layering,
                "choices": {k: list(v) for k, v in sorted(self.choices.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        try:
            return cls(d.get("granularity", COARSE), d.get("layering", UNIFORM),
                       {k: tuple(v) for k, v in d.get("choices", {}).items()})
        except (TypeError, AttributeError) as exc:
            raise FormatError(f"bad search-space definition: {exc}") from exc


def save_space(space: SearchSpace, path: str | Path) -> None:
    Path(path).write_text(json.dumps(space.to_dict(), indent=2, sort_keys=True) + "\n")


def load_space(path: str | Path) -> SearchSpace:
    try:
        return SearchSpace.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read search space {path}: {exc}") from exc


def head_query_pairs(choices: dict, sup: SupernetConfig) -> list[tuple[int, int]]:
    G = sup.heads_per_group
    return [(h, q) for h in choices["h"] for q in choices["q"]
            if q <= sup.n_query_groups and h % q == 0 and h // q <= G]


def _queries_for(h: int, choices: dict, sup: SupernetConfig) -> list[int]:
    G = sup.heads_per_group
    return [q for q in choices["q"] if q <= sup.n_query_groups and h % q == 0 and h // q <= G]


def _pick(rng: np.random.Generator, values) -> int:
    return int(values[int(rng.integers(len(values)))])


def _sample_subset(rng: np.random.Generator, n: int, k: int, exclude=()) -> list[int]:
    pool = [i for i in range(n) if i not in set(exclude)]
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]


def sample_heads(rng, sup: SupernetConfig, h: int, q: int) -> tuple[list[int], list[int]]:
    """Fine-grained head selection: q groups, h/q distinct heads inside each."""
    G = sup.heads_per_group
    groups = _sample_subset(rng, sup.n_query_groups, q)
    heads = [g * G + j for g in groups for j in _sample_subset(rng, G, h // q)]
    return groups, heads


def sample_layer_tuple(rng, ch: dict, sup: SupernetConfig) -> tuple[int, int, int, int]:
    """(h, h_s, d, q) for one layer; q drawn among those valid for h."""
    hs_ok = [h for h in ch["h"] if _queries_for(h, ch, sup)]
    h = _pick(rng, hs_ok)
    q = _pick(rng, _queries_for(h, ch, sup))
    return h, _pick(rng, ch["h_s"]), _pick(rng, ch["d"]), q


def sample_layer_indices(rng, sup: SupernetConfig, h, h_s, d, q):
    groups, heads = sample_heads(rng, sup, h, q)
    return (heads, _sample_subset(rng, sup.head_size, h_s),
            _sample_subset(rng, sup.intermediate_size, d), groups)


def sample(space: SearchSpace, sup: SupernetConfig, rng: np.random.Generator) -> SubnetworkConfig:
    ch = space.resolved(sup).choices
    l = _pick(rng, ch["l"])
    e = _pick(rng, ch["e"])
    if space.layerwise:
        tuples = [sample_layer_tuple(rng, ch, sup) for _ in range(l)]
    else:
        tuples = [sample_layer_tuple(rng, ch, sup)] * l
    h, h_s, d, q = (list(col) for col in zip(*tuples))
    cfg = SubnetworkConfig(l=l, e=e, h=h, h_s=h_s, d=d, q=q)
    if space.fine_grained:
        cfg.layer_indices = _sample_subset(rng, sup.n_layer, l)
        cfg.embd_indices = _sample_subset(rng, sup.n_embd, e)
        rows = [sample_layer_indices(rng, sup, *t) for t in zip(h, h_s, d, q)]
        cfg.head_indices = [r[0] for r in rows]
        cfg.head_size_indices = [r[1] for r in rows]
        cfg.intermediate_indices = [r[2] for r in rows]
        cfg.query_group_indices = [r[3] for r in rows]
    return cfg


def validate(space: SearchSpace, cfg: SubnetworkConfig, sup: SupernetConfig) -> list[str]:
    """Violations of ``cfg`` against the space; an empty list means valid.

    Each message starts with a tag: ``granularity``, ``uniformity``,
    ``choice``, ``bounds`` or ``index``.
    """
    out: list[str] = []
    try:
        ch = space.resolved(sup).choices
    except ValidationError as exc:
        return [f"space: {exc}"]
    if space.fine_grained != cfg.fine_grained:
        want = "fine-grained index sets" if space.fine_grained else "no index sets"
        out.append(f"granularity: {space.granularity} space requires {want}")
    if not space.layerwise and not cfg.is_uniform():
        out.append("uniformity: per-layer values differ in a uniform space")
    structural = subnet_violations(cfg, sup)
    for msg in structural:
        tag = "index" if any(f in msg for f in INDEX_FIELDS) or "index sets" in msg else "bounds"
        out.append(f"{tag}: {msg}")
    if any(len(getattr(cfg, k)) != cfg.l for k in PER_LAYER):
        return out
    if cfg.l not in ch["l"]:
        out.append(f"choice: l={cfg.l} not in {list(ch['l'])}")
    if cfg.e not in ch["e"]:
        out.append(f"choice: e={cfg.e} not in {list(ch['e'])}")
    for k in PER_LAYER:
        for i, v in enumerate(getattr(cfg, k)):
            if v not in ch[k]:
                out.append(f"choice: {k}[{i}]={v} not in {list(ch[k])}")
    return out


def cardinality(space: SearchSpace, sup: SupernetConfig) -> int:
    """Closed-form size of the space over its choice sets.

    Coarse uniform: ``|l| |e| |hq| |h_s| |d|``; coarse layer-wise:
    ``|e| (|hq| |h_s| |d|)^L``. Fine-grained spaces replace each factor by
    ``2^(factor)``. ``|hq|`` counts valid (heads, query-group) pairs and
    ``L`` is the deepest layer choice. The layer-wise forms count networks
    at depth ``L`` only.
    """
    ch = space.resolved(sup).choices
    nl, ne, nhs, nd = (len(ch[k]) for k in ("l", "e", "h_s", "d"))
    nhq = len(head_query_pairs(ch, sup))
    L = max(ch["l"])
    if not space.fine_grained:
        if not space.layerwise:
            return nl * ne * nhq * nhs * nd
        return ne * (nhq * nhs * nd) ** L
    if not space.layerwise:
        return 2 ** (ne * nhq * nhs * nd * nl)
    return 2 ** ne * (2 ** nhq * 2 ** nhs * 2 ** nd) ** L * 2 ** nl


def enumerate_coarse(space: SearchSpace, sup: SupernetConfig, depth: int | None = None
                     ) -> Iterator[SubnetworkConfig]:
    """Every configuration of a coarse space (optionally at one depth)."""
    if space.fine_grained:
        raise ValidationError("enumeration is only defined for coarse spaces")
    ch = space.resolved(sup).choices
    depths = [depth] if depth is not None else list(ch["l"])
    tuples = [(h, hs, d, q) for (h, q) in head_query_pairs(ch, sup)
              for hs in ch["h_s"] for d in ch["d"]]
    for l in depths:
        for e in ch["e"]:
            if space.layerwise:
                combos = itertools.product(tuples, repeat=l)
            else:
                combos = ((t,) * l for t in tuples)
            for combo in combos:
                h, hs, d, q = (list(c) for c in zip(*combo))
                yield SubnetworkConfig(l=l, e=e, h=h, h_s=hs, d=d, q=q)


def as_fine_grained(cfg: SubnetworkConfig, sup: SupernetConfig) -> SubnetworkConfig:
    """The fine-grained config selecting exactly the prefixes a coarse cfg uses."""
    if cfg.fine_grained:
        return cfg.copy()
    G = sup.heads_per_group
    out = cfg.copy()
    out.layer_indices = list(range(cfg.l))
    out.embd_indices = list(range(cfg.e))
    out.query_group_indices = [list(range(q)) for q in cfg.q]
    out.head_indices = [[g * G + j for g in range(q) for j in range(h // q)] for h, q in zip(cfg.h, cfg.q)]
    out.head_size_indices = [list(range(v)) for v in cfg.h_s]
    out.intermediate_indices = [list(range(v)) for v in cfg.d]
    return out


def default_space(granularity: str = COARSE, layering: str = UNIFORM) -> SearchSpace:
    return SearchSpace(granularity, layering, {})
