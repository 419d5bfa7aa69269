import csv
import zlib

import numpy as np
import pytest

from snforge import ParamBin, SubnetworkConfig, SupernetConfig, count_params
from snforge.errors import RejectionFailure, ValidationError
from snforge.evolution import (CROSS_DIMS, EvoParams, brute_force_best, constrain, crossover, mutate, run_search)
from snforge.space import SearchSpace, enumerate_coarse, sample, validate

TOY = SupernetConfig(n_layer=2, n_embd=3, n_head=2, head_size=2, intermediate_size=4, vocab_size=16, max_seq=8)
BIG = SupernetConfig(n_layer=4, n_embd=8, n_head=4, head_size=4, intermediate_size=8, n_query_groups=2,
                     vocab_size=16, max_seq=8)
SPACES = [SearchSpace(g, l) for g in ("coarse", "fine") for l in ("uniform", "layerwise")]


def hash_fitness(cfg):
    """Deterministic pseudo-random fitness keyed on the configuration."""
    return (zlib.crc32(cfg.key().encode()) % 10_000) / 100.0


def changed_dims(a, b):
    """Dimensions that differ between two uniform configs (per-layer values read from layer 0)."""
    def flat(c):
        return {"l": c.l, "e": c.e, "h": c.h[0], "h_s": c.h_s[0], "d": c.d[0], "q": c.q[0]}
    fa, fb = flat(a), flat(b)
    return {k for k in fa if fa[k] != fb[k]}


def test_layerwise_depth_truncation():
    space = SearchSpace("coarse", "layerwise", {"l": [2, 4]})
    cfg = SubnetworkConfig(l=4, e=8, h=[4, 2, 1, 2], h_s=[1, 2, 3, 4], d=[8, 7, 6, 5], q=[2, 1, 1, 2])
    rng = np.random.default_rng(0)
    seen = False
    for _ in range(300):
        out = mutate(cfg, space, BIG, rng)
        if out.l == 2:
            seen = True
            assert out.h == [4, 2] and out.h_s == [1, 2] and out.d == [8, 7] and out.q == [2, 1]
            assert out.e == cfg.e
    assert seen


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.name)
def test_mutation_stays_in_space(space):
    rng = np.random.default_rng(1)
    for _ in range(500):
        cfg = sample(space, BIG, rng)
        out = mutate(cfg, space, BIG, rng)
        assert validate(space, out, BIG) == []


def test_uniform_mutation_changes_at_most_one_dim():
    space = SearchSpace("coarse", "uniform")
    rng = np.random.default_rng(2)
    for _ in range(1000):
        cfg = sample(space, BIG, rng)
        diff = changed_dims(cfg, mutate(cfg, space, BIG, rng))
        # under grouped attention a head change may be forced to re-pick q
        assert len(diff) <= 1 or diff == {"h", "q"}


def test_uniform_mutation_mha_single_dim():
    space = SearchSpace("coarse", "uniform")
    sup = SupernetConfig(4, 8, 4, 4, 8, vocab_size=16, max_seq=8)
    rng = np.random.default_rng(3)
    for _ in range(1000):
        cfg = sample(space, sup, rng)
        diff = changed_dims(cfg, mutate(cfg, space, sup, rng)) - {"q"}
        assert len(diff) <= 1


def test_fine_embedding_growth_keeps_original():
    space = SearchSpace("fine", "uniform", {"e": [4, 6]})
    rng = np.random.default_rng(4)
    cfg = sample(space, BIG, rng)
    while cfg.e != 4:
        cfg = sample(space, BIG, rng)
    grown = 0
    for _ in range(300):
        out = mutate(cfg, space, BIG, rng)
        if out.e == 6:
            grown += 1
            assert out.embd_indices[:4] == cfg.embd_indices
            new = set(out.embd_indices) - set(cfg.embd_indices)
            assert len(new) == 2 and len(set(out.embd_indices)) == 6
    assert grown


def test_fine_shrink_drops_last_selected():
    space = SearchSpace("fine", "layerwise")
    rng = np.random.default_rng(5)
    for _ in range(300):
        cfg = sample(space, BIG, rng)
        out = mutate(cfg, space, BIG, rng)
        if out.e < cfg.e:
            assert out.embd_indices == cfg.embd_indices[:out.e]
        for i in range(min(out.l, cfg.l)):
            if out.d[i] < cfg.d[i]:
                assert out.intermediate_indices[i] == cfg.intermediate_indices[i][:out.d[i]]


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.name)
def test_crossover_idempotent(space):
    rng = np.random.default_rng(6)
    for _ in range(200):
        p = sample(space, BIG, rng)
        assert crossover(p, p, rng, BIG) == p


def test_crossover_forced_coins():
    p1 = SubnetworkConfig(l=2, e=4, h=[2, 2], h_s=[1, 1], d=[3, 3], q=[1, 1])
    p2 = SubnetworkConfig(l=2, e=6, h=[4, 4], h_s=[2, 2], d=[5, 5], q=[2, 2])
    child = crossover(p1, p2, None, BIG, coins={"e": 2, "h": 1, "q": 2, "h_s": 2, "d": 1})
    assert (child.e, child.h, child.q, child.h_s, child.d) == (6, [2, 2], [2, 2], [2, 2], [3, 3])


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.name)
def test_crossover_membership(space):
    rng = np.random.default_rng(7)
    done = 0
    while done < 1000:
        a, b = sample(space, BIG, rng), sample(space, BIG, rng)
        if a.l != b.l:
            continue
        c = crossover(a, b, rng, BIG)
        for k in CROSS_DIMS:
            assert getattr(c, k) in (getattr(a, k), getattr(b, k))
        if space.fine_grained:
            assert c.embd_indices in (a.embd_indices, b.embd_indices)
            assert c.intermediate_indices in (a.intermediate_indices, b.intermediate_indices)
        assert validate(space, c, BIG) == []
        done += 1


def test_crossover_layer_mismatch():
    a = SubnetworkConfig(l=1, e=4, h=[2], h_s=[1], d=[3], q=[1])
    b = SubnetworkConfig(l=2, e=4, h=[2, 2], h_s=[1, 1], d=[3, 3], q=[1, 1])
    with pytest.raises(ValidationError):
        crossover(a, b, np.random.default_rng(0), BIG)


def test_constrain_passthrough_and_wide_bin():
    space = SearchSpace("coarse", "uniform")
    rng = np.random.default_rng(8)
    cfg = sample(space, TOY, rng)
    p = count_params(TOY, cfg)
    assert constrain(cfg, ParamBin(p, p), space, TOY, rng, 1) is cfg
    wide = ParamBin(1, 10 ** 9)
    calls = []
    out = constrain(None, wide, space, TOY, rng, 1, propose=lambda: calls.append(1) or sample(space, TOY, rng))
    assert len(calls) == 1 and count_params(TOY, out) in wide


def test_constrain_bin_with_three_members():
    space = SearchSpace("coarse", "uniform")
    configs = list(enumerate_coarse(space, TOY))
    counts = sorted({count_params(TOY, c) for c in configs})
    by_count = {n: [c.key() for c in configs if count_params(TOY, c) == n] for n in counts}
    bin = None
    for i, lo in enumerate(counts):
        for hi in counts[i:]:
            members = [k for n in counts if lo <= n <= hi for k in by_count[n]]
            if len(members) == 3:
                bin, expected = ParamBin(lo, hi), set(members)
                break
        if bin:
            break
    assert bin is not None
    rng = np.random.default_rng(9)
    seen = {constrain(None, bin, space, TOY, rng, 5000).key() for _ in range(300)}
    assert seen == expected


def test_constrain_failure_carries_attempts():
    space = SearchSpace("coarse", "uniform")
    with pytest.raises(RejectionFailure) as info:
        constrain(None, ParamBin(1, 2), space, TOY, np.random.default_rng(0), 25)
    assert info.value.attempts == 25


def test_degenerate_elitism_keeps_population():
    space = SearchSpace("coarse", "layerwise")
    evo = EvoParams(population=6, elites=6, epochs=4, offspring=0, random_samples=0, seed=1)
    res = run_search(space, TOY, [ParamBin(1, 10 ** 9)], evo, hash_fitness)
    per_epoch = {}
    for epoch, _b, cid, _p, _f in res.history:
        per_epoch.setdefault(epoch, set()).add(cid)
    pops = [per_epoch[e] for e in sorted(per_epoch)]
    assert all(p == pops[0] for p in pops[1:])


def test_best_is_monotone_and_members_in_bin():
    space = SearchSpace("fine", "layerwise")
    counts = [count_params(BIG, sample(space, BIG, np.random.default_rng(s))) for s in range(200)]
    bin = ParamBin(int(np.percentile(counts, 30)), int(np.percentile(counts, 70)))
    evo = EvoParams(population=8, elites=3, epochs=8, offspring=6, random_samples=2, seed=3,
                    mutation_prob=0.5, crossover_prob=0.5)
    res = run_search(space, BIG, [bin], evo, hash_fitness)
    best = res.bins[0].best_per_epoch
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert all(bin.lower <= row[3] <= bin.upper for row in res.history)
    assert res.bins[0].best.fitness == best[-1]


def test_search_is_reproducible(tmp_path):
    space = SearchSpace("coarse", "layerwise")
    evo = EvoParams(population=6, elites=2, epochs=5, offspring=4, random_samples=2, seed=11)
    bins = [ParamBin(1, 10 ** 9)]
    run_search(space, TOY, bins, evo, hash_fitness, out_dir=tmp_path / "a")
    run_search(space, TOY, bins, evo, hash_fitness, out_dir=tmp_path / "b")
    assert (tmp_path / "a/history.csv").read_bytes() == (tmp_path / "b/history.csv").read_bytes()


def test_resume_after_interruption(tmp_path):
    space = SearchSpace("fine", "layerwise")
    evo = EvoParams(population=6, elites=2, epochs=6, offspring=4, random_samples=2, seed=5,
                    mutation_prob=0.5, crossover_prob=0.5)
    bins = [ParamBin(1, 10 ** 9)]
    ref = run_search(space, BIG, bins, evo, hash_fitness, out_dir=tmp_path / "ref")

    calls = {"n": 0}

    def flaky(cfg):
        calls["n"] += 1
        if calls["n"] > 25:
            raise KeyboardInterrupt
        return hash_fitness(cfg)

    with pytest.raises(KeyboardInterrupt):
        run_search(space, BIG, bins, evo, flaky, out_dir=tmp_path / "cut")
    res = run_search(space, BIG, bins, evo, hash_fitness, out_dir=tmp_path / "cut", resume=True)
    assert res.history == ref.history
    assert (tmp_path / "cut/history.csv").read_bytes() == (tmp_path / "ref/history.csv").read_bytes()


def test_infeasible_bin_does_not_stop_others(tmp_path):
    space = SearchSpace("coarse", "uniform")
    evo = EvoParams(population=4, elites=2, epochs=2, offspring=2, random_samples=1, max_attempts=50)
    res = run_search(space, TOY, [ParamBin(1, 2), ParamBin(1, 10 ** 9)], evo, hash_fitness, out_dir=tmp_path)
    assert res.bins[0].best is None and "infeasible" in res.bins[0].error
    assert res.bins[1].best is not None
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {r["bin"] for r in rows} == {"1"}


def test_exhaustive_budget_finds_global_optimum():
    space = SearchSpace("coarse", "uniform")
    bin = ParamBin(1, 10 ** 9)
    truth = brute_force_best(enumerate_coarse(space, TOY), TOY, bin, hash_fitness)
    evo = EvoParams(population=16, elites=4, epochs=20, offspring=8, random_samples=4, seed=0)
    best = run_search(space, TOY, [bin], evo, hash_fitness).bins[0].best
    assert best.fitness == truth.fitness


def test_nonfinite_fitness_is_worst():
    space = SearchSpace("coarse", "uniform")
    evo = EvoParams(population=6, elites=2, epochs=3, offspring=4, random_samples=2, seed=2)

    def fit(cfg):
        return float("nan") if cfg.e == 3 else hash_fitness(cfg)

    best = run_search(space, TOY, [ParamBin(1, 10 ** 9)], evo, fit).bins[0].best
    assert best.cfg.e != 3


def test_evo_params_validation():
    with pytest.raises(ValidationError):
        EvoParams(population=2, elites=3)
    with pytest.raises(ValidationError):
        EvoParams(mutation_prob=1.5)
    with pytest.raises(ValidationError):
        EvoParams.from_dict({"populaton": 3})
