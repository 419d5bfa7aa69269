"""Bin-constrained evolutionary search over a sub-network search space.

Per parameter bin: sample an initial population inside the bin, then each
epoch keep the ``k`` best as elites, breed ``lambda`` mutants and ``lambda``
crossovers from them (each slot gated by its probability, otherwise filled
with a fresh random sample), add ``r`` random samples, and keep the ``N``
best of the union. Every proposal is forced into the bin by rejection
sampling. Fitness is minimised; ties go to the smaller model, then to the
earlier discovery.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ParamBin, SubnetworkConfig, SupernetConfig
from .errors import FitnessError, RejectionFailure, SearchError, ValidationError
from .model import count_params
from .space import (SearchSpace, _pick, _queries_for, _sample_subset, sample,
                    sample_layer_indices, sample_layer_tuple)

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "bin", "candidate_id", "params", "fitness")


@dataclass
class EvoParams:
    population: int = 16
    elites: int = 4
    epochs: int = 20
    offspring: int = 8
    random_samples: int = 4
    mutation_prob: float = 0.2
    crossover_prob: float = 0.2
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        if not 1 <= self.elites <= self.population:
            raise ValidationError(f"elites must be in [1, population], got {self.elites}")
        if self.epochs < 1 or self.max_attempts < 1:
            raise ValidationError("epochs and max_attempts must be >= 1")
        if self.offspring < 0 or self.random_samples < 0:
            raise ValidationError("offspring and random_samples must be >= 0")
        for p in (self.mutation_prob, self.crossover_prob):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"probability {p} outside [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "EvoParams":
        names = cls.__dataclass_fields__
        unknown = set(d) - set(names)
        if unknown:
            raise ValidationError(f"unknown evo fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Candidate:
    cfg: SubnetworkConfig
    params: int
    fitness: float | None = None
    cid: int = 0

    def sort_key(self):
        f = self.fitness if self.fitness is not None else math.inf
        return (f, self.params, self.cid)


# -- variation operators ----------------------------------------------------

def mutation_dims(sup: SupernetConfig) -> list[str]:
    """Query groups only vary independently under grouped-query attention."""
    dims = ["l", "e", "h", "d", "h_s"]
    if sup.attention_variant == "gqa":
        dims.insert(3, "q")
    return dims


def _resize(idx: list[int], n: int, bound: int, rng) -> list[int]:
    """Grow by sampling unused indices, shrink by dropping the last-selected."""
    if n <= len(idx):
        return list(idx[:n])
    return list(idx) + _sample_subset(rng, bound, n - len(idx), exclude=idx)


def regroup_heads(rng, sup: SupernetConfig, groups: list[int], heads: list[int], h: int, q: int):
    G = sup.heads_per_group
    keep = list(groups[:q])
    groups2 = keep + _sample_subset(rng, sup.n_query_groups, q - len(keep), exclude=keep)
    per = h // q
    heads2 = []
    for g in groups2:
        mine = [hd for hd in heads if hd // G == g][:per]
        fresh = _sample_subset(rng, G, per - len(mine), exclude=[hd % G for hd in mine])
        heads2 += mine + [g * G + j for j in fresh]
    return groups2, heads2


def _heads_choice(ch, sup, q_now: int, rng) -> tuple[int, int]:
    h = _pick(rng, [h for h in ch["h"] if _queries_for(h, ch, sup)])
    valid = _queries_for(h, ch, sup)
    q = q_now if q_now in valid else _pick(rng, valid)
    return h, q


def mutate(cfg: SubnetworkConfig, space: SearchSpace, sup: SupernetConfig,
           rng: np.random.Generator) -> SubnetworkConfig:
    """Resample exactly one dimension; the new value may equal the old one.

    Changing the head count re-picks the query groups only when the old
    count no longer divides it (under MHA the two move together).
    """
    ch = space.resolved(sup).choices
    out = cfg.copy()
    dims = mutation_dims(sup)
    x = dims[int(rng.integers(len(dims)))]
    fine = out.fine_grained

    if x == "l":
        l2 = _pick(rng, ch["l"])
        if l2 < out.l:
            for k in ("h", "h_s", "d", "q"):
                setattr(out, k, getattr(out, k)[:l2])
            if fine:
                out.layer_indices = out.layer_indices[:l2]
                for k in ("head_indices", "head_size_indices", "intermediate_indices", "query_group_indices"):
                    setattr(out, k, getattr(out, k)[:l2])
        elif l2 > out.l:
            for _ in range(l2 - out.l):
                if space.layerwise:
                    h, hs, d, q = sample_layer_tuple(rng, ch, sup)
                else:
                    h, hs, d, q = out.h[0], out.h_s[0], out.d[0], out.q[0]
                out.h.append(h)
                out.h_s.append(hs)
                out.d.append(d)
                out.q.append(q)
                if fine:
                    heads, hs_idx, d_idx, groups = sample_layer_indices(rng, sup, h, hs, d, q)
                    out.layer_indices += _sample_subset(rng, sup.n_layer, 1, exclude=out.layer_indices)
                    out.head_indices.append(heads)
                    out.head_size_indices.append(hs_idx)
                    out.intermediate_indices.append(d_idx)
                    out.query_group_indices.append(groups)
        out.l = l2
        return out

    if x == "e":
        out.e = _pick(rng, ch["e"])
        if fine:
            out.embd_indices = _resize(out.embd_indices, out.e, sup.n_embd, rng)
        return out

    layers = [int(rng.integers(out.l))] if space.layerwise else list(range(out.l))
    first = layers[0]
    if x == "h":
        new = _heads_choice(ch, sup, out.q[first], rng)
    elif x == "q":
        new = (out.h[first], _pick(rng, _queries_for(out.h[first], ch, sup)))
    else:
        new = _pick(rng, ch[x])
    for i in layers:
        if x in ("h", "q"):
            out.h[i], out.q[i] = new
            if fine:
                out.query_group_indices[i], out.head_indices[i] = regroup_heads(
                    rng, sup, out.query_group_indices[i], out.head_indices[i], out.h[i], out.q[i])
        elif x == "h_s":
            out.h_s[i] = new
            if fine:
                out.head_size_indices[i] = _resize(out.head_size_indices[i], new, sup.head_size, rng)
        else:
            out.d[i] = new
            if fine:
                out.intermediate_indices[i] = _resize(out.intermediate_indices[i], new,
                                                      sup.intermediate_size, rng)
    return out


CROSS_DIMS = ("e", "h", "q", "h_s", "d")


def crossover(p1: SubnetworkConfig, p2: SubnetworkConfig, rng: np.random.Generator,
              sup: SupernetConfig, coins: dict[str, int] | None = None) -> SubnetworkConfig:
    """Inherit each of (e, h, q, h_s, d) from one parent with probability 1/2.

    Layer-wise lists and fine-grained index sets travel with their value.
    ``coins`` forces the parent (1 or 2) per dimension. If the inherited
    query groups do not fit the inherited heads in some layer, the whole
    query-group list is taken from the heads' parent instead.
    """
    if p1.l != p2.l:
        raise ValidationError(f"crossover needs equal layer counts, got {p1.l} and {p2.l}")
    if coins is None:
        coins = {x: 1 if rng.random() < 0.5 else 2 for x in CROSS_DIMS}
    src = {x: (p1 if coins[x] == 1 else p2) for x in CROSS_DIMS}
    child = p1.copy()
    fine = p1.fine_grained
    child.e = src["e"].e
    child.h = list(src["h"].h)
    child.q = list(src["q"].q)
    child.h_s = list(src["h_s"].h_s)
    child.d = list(src["d"].d)
    if fine:
        child.embd_indices = list(src["e"].embd_indices)
        child.head_indices = [list(r) for r in src["h"].head_indices]
        child.query_group_indices = [list(r) for r in src["q"].query_group_indices]
        child.head_size_indices = [list(r) for r in src["h_s"].head_size_indices]
        child.intermediate_indices = [list(r) for r in src["d"].intermediate_indices]
    G = sup.heads_per_group
    hp = src["h"]
    for i in range(child.l):
        h, q = child.h[i], child.q[i]
        ok = h % q == 0 and h // q <= G
        if ok and fine:
            groups = set(child.query_group_indices[i])
            owners = [hd // G for hd in child.head_indices[i]]
            ok = set(owners) == groups and all(owners.count(g) == h // q for g in groups)
        if not ok:
            child.q = list(hp.q)
            if fine:
                child.query_group_indices = [list(r) for r in hp.query_group_indices]
            break
    return child


def constrain(cfg: SubnetworkConfig | None, bin: ParamBin, space: SearchSpace, sup: SupernetConfig,
              rng: np.random.Generator, max_attempts: int,
              propose: Callable[[], SubnetworkConfig] | None = None) -> SubnetworkConfig:
    """Rejection sampling into ``bin``; ``cfg`` passes through if it already fits.

    Rejected proposals are replaced by ``propose()`` (a fresh sample from the
    space by default).
    """
    if cfg is not None and count_params(sup, cfg) in bin:
        return cfg
    draw = propose or (lambda: sample(space, sup, rng))
    for _ in range(max_attempts):
        cand = draw()
        if count_params(sup, cand) in bin:
            return cand
    raise RejectionFailure(max_attempts, bin.lower, bin.upper)


# -- search loop -------------------------------------------------------------

@dataclass
class BinResult:
    bin: ParamBin
    best: Candidate | None = None
    error: str | None = None
    best_per_epoch: list[float] = field(default_factory=list)


@dataclass
class SearchResult:
    bins: list[BinResult]
    history: list[tuple]

    @property
    def best(self) -> list[Candidate | None]:
        return [b.best for b in self.bins]


def _evaluate(cands: list[Candidate], fitness) -> None:
    todo = [c for c in cands if c.fitness is None]
    if not todo:
        return
    many = getattr(fitness, "evaluate_many", None)
    if many is not None:
        values = many([c.cfg for c in todo])
    else:
        values = []
        for c in todo:
            try:
                values.append(fitness(c.cfg))
            except FitnessError as exc:
                logger.warning("candidate %d discarded: %s", c.cid, exc)
                values.append(math.inf)
    for c, v in zip(todo, values):
        v = float(v)
        c.fitness = v if math.isfinite(v) else math.inf


class _BinState:
    """Mutable per-bin search state; JSON round-trippable for resumption."""

    def __init__(self, sup: SupernetConfig):
        self.sup = sup
        self.cache: dict[str, Candidate] = {}
        self.population: list[Candidate] = []
        self.epoch = 0
        self.history: list[tuple] = []
        self.best_per_epoch: list[float] = []

    def admit(self, cfg: SubnetworkConfig) -> Candidate:
        key = cfg.key()
        cand = self.cache.get(key)
        if cand is None:
            cand = Candidate(cfg, count_params(self.sup, cfg), None, len(self.cache))
            self.cache[key] = cand
        return cand

    def to_json(self, rng: np.random.Generator) -> dict:
        return {
            "epoch": self.epoch,
            "rng": rng.bit_generator.state,
            "candidates": [{"cfg": c.cfg.to_dict(), "params": c.params, "fitness": c.fitness, "cid": c.cid}
                           for c in self.cache.values()],
            "population": [c.cid for c in self.population],
            "history": [list(r) for r in self.history],
            "best_per_epoch": self.best_per_epoch,
        }

    @classmethod
    def from_json(cls, d: dict, sup: SupernetConfig, rng: np.random.Generator) -> "_BinState":
        st = cls(sup)
        by_id = {}
        for c in d["candidates"]:
            cand = Candidate(SubnetworkConfig.from_dict(c["cfg"]), c["params"], c["fitness"], c["cid"])
            st.cache[cand.cfg.key()] = cand
            by_id[cand.cid] = cand
        st.population = [by_id[i] for i in d["population"]]
        st.epoch = d["epoch"]
        st.history = [tuple(r) for r in d["history"]]
        st.best_per_epoch = list(d["best_per_epoch"])
        rng.bit_generator.state = d["rng"]
        return st


def _format_fitness(f: float | None) -> str:
    return "inf" if f is None or not math.isfinite(f) else repr(float(f))


def _record(st: _BinState, b: int, epoch: int) -> None:
    for c in st.population:
        st.history.append((epoch, b, c.cid, c.params, _format_fitness(c.fitness)))
    st.best_per_epoch.append(min(c.sort_key() for c in st.population)[0])


def _search_bin(b: int, bin: ParamBin, space: SearchSpace, sup: SupernetConfig, evo: EvoParams,
                fitness, state_path: Path | None, resume: bool, on_epoch=None) -> tuple[_BinState, Candidate]:
    rng = np.random.default_rng([evo.seed, b])
    if resume and state_path is not None and state_path.is_file():
        st = _BinState.from_json(json.loads(state_path.read_text()), sup, rng)
    else:
        st = _BinState(sup)

    def random_member() -> SubnetworkConfig:
        return constrain(None, bin, space, sup, rng, evo.max_attempts)

    if not st.population and st.epoch == 0:
        seen: dict[str, Candidate] = {}
        for _ in range(evo.population):
            cand = st.admit(random_member())
            seen.setdefault(cand.cfg.key(), cand)
        st.population = list(seen.values())
        _evaluate(st.population, fitness)

    while st.epoch < evo.epochs:
        pop = sorted(st.population, key=Candidate.sort_key)
        _record(st, b, st.epoch)
        elites = pop[: evo.elites]
        offspring: list[SubnetworkConfig] = []
        for _ in range(evo.offspring):
            if rng.random() < evo.mutation_prob:
                parent = elites[int(rng.integers(len(elites)))].cfg
                prop = lambda p=parent: mutate(p, space, sup, rng)  # noqa: E731
                try:
                    offspring.append(constrain(prop(), bin, space, sup, rng, evo.max_attempts, prop))
                    continue
                except RejectionFailure:
                    pass
            offspring.append(random_member())
        for _ in range(evo.offspring):
            if rng.random() < evo.crossover_prob:
                child = None
                for _ in range(evo.max_attempts):
                    a = elites[int(rng.integers(len(elites)))].cfg
                    c = elites[int(rng.integers(len(elites)))].cfg
                    if a.l == c.l:
                        prop = lambda a=a, c=c: crossover(a, c, rng, sup)  # noqa: E731
                        try:
                            child = constrain(prop(), bin, space, sup, rng, evo.max_attempts, prop)
                        except RejectionFailure:
                            child = None
                        break
                if child is not None:
                    offspring.append(child)
                    continue
            offspring.append(random_member())
        offspring += [random_member() for _ in range(evo.random_samples)]

        union: dict[str, Candidate] = {c.cfg.key(): c for c in elites}
        for cfg in offspring:
            cand = st.admit(cfg)
            union.setdefault(cand.cfg.key(), cand)
        members = list(union.values())
        _evaluate(members, fitness)
        st.population = sorted(members, key=Candidate.sort_key)[: evo.population]
        st.epoch += 1
        if state_path is not None:
            state_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = state_path.with_name(state_path.name + ".tmp")
            tmp.write_text(json.dumps(st.to_json(rng)))
            tmp.replace(state_path)
        if on_epoch is not None:
            on_epoch(b, st)
    if len(st.best_per_epoch) == evo.epochs:
        _record(st, b, evo.epochs)
    best = min(st.population, key=Candidate.sort_key)
    return st, best


def write_history(path: Path, rows: list[tuple]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        w.writerows(rows)
    tmp.replace(path)


def run_search(space: SearchSpace, sup: SupernetConfig, bins: list[ParamBin], evo: EvoParams,
               fitness, out_dir: str | Path | None = None, resume: bool = False) -> SearchResult:
    """Search every bin; an infeasible bin is reported and the others proceed.

    With ``out_dir`` the per-epoch history CSV and per-bin state are rewritten
    after every epoch, and ``resume=True`` continues from that state.
    """
    space = space.resolved(sup)
    out = Path(out_dir) if out_dir is not None else None
    results: list[BinResult] = []
    rows_done: list[tuple] = []
    for b, bin in enumerate(bins):
        state_path = out / f"bin{b}" / "state.json" if out else None

        def flush(_b, st, done=rows_done):
            if out is not None:
                write_history(out / "history.csv", done + st.history)

        try:
            st, best = _search_bin(b, bin, space, sup, evo, fitness, state_path, resume, flush)
        except (RejectionFailure, SearchError) as exc:
            logger.error("bin %d [%d, %d] infeasible: %s", b, bin.lower, bin.upper, exc)
            results.append(BinResult(bin, None, f"infeasible: {exc}"))
            continue
        rows_done = rows_done + st.history
        results.append(BinResult(bin, best, None, st.best_per_epoch))
        logger.info("bin %d: best fitness %s with %d params", b, _format_fitness(best.fitness), best.params)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_history(out / "history.csv", rows_done)
    return SearchResult(results, rows_done)


def load_bins(spec) -> list[ParamBin]:
    """Bins from a list of ``[lower, upper]`` pairs or ``{"lower", "upper"}`` dicts."""
    out = []
    for item in spec:
        if isinstance(item, dict):
            out.append(ParamBin(int(item["lower"]), int(item["upper"])))
        else:
            lo, hi = item
            out.append(ParamBin(int(lo), int(hi)))
    if not out:
        raise ValidationError("no parameter bins given")
    return out


def brute_force_best(configs, sup: SupernetConfig, bin: ParamBin, fitness) -> Candidate:
    """Exhaustive argmin with the search's tie-breaking, for small spaces."""
    best = None
    for n, cfg in enumerate(configs):
        p = count_params(sup, cfg)
        if p not in bin:
            continue
        cand = Candidate(cfg, p, float(fitness(cfg)), n)
        if best is None or (cand.fitness, cand.params) < (best.fitness, best.params):
            best = cand
    return best
