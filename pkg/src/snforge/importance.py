"""Activation and weight-magnitude importance of structured units.

Raw scores are kept per unit group (embedding channels, per-layer FFN
neurons, per-layer heads, blocks). A sub-network's score softmax-normalises
each group and sums the normalised scores of the units it keeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import read_archive, write_archive
from .config import SubnetworkConfig, SupernetConfig
from .data import TokenizedCorpus, sample_batch
from .errors import ValidationError

ACTIVATION, WEIGHT = "activation", "weight"


@dataclass
class ImportanceTables:
    ffn: list[np.ndarray]
    emb: np.ndarray
    heads: list[np.ndarray]
    blocks: np.ndarray
    source: str = ACTIVATION

    def check(self, sup: SupernetConfig) -> None:
        ok = (len(self.ffn) == sup.n_layer and len(self.heads) == sup.n_layer
              and self.emb.shape == (sup.n_embd,) and self.blocks.shape == (sup.n_layer,)
              and all(f.shape == (sup.intermediate_size,) for f in self.ffn)
              and all(h.shape == (sup.n_head,) for h in self.heads))
        if not ok:
            raise ValidationError("importance tables do not match the supernet dimensions")

    def save(self, path) -> None:
        tensors = {"imp/emb": self.emb.astype(np.float32), "imp/block": self.blocks.astype(np.float32)}
        for i, (f, h) in enumerate(zip(self.ffn, self.heads)):
            tensors[f"imp/ffn/{i}"] = f.astype(np.float32)
            tensors[f"imp/head/{i}"] = h.astype(np.float32)
        write_archive(path, {"kind": "importance", "source": self.source}, tensors)

    @classmethod
    def load(cls, path) -> "ImportanceTables":
        cfg, t = read_archive(path)
        n = sum(1 for k in t if k.startswith("imp/ffn/"))
        return cls([t[f"imp/ffn/{i}"] for i in range(n)], t["imp/emb"],
                   [t[f"imp/head/{i}"] for i in range(n)], t["imp/block"], cfg.get("source", ACTIVATION))


def compute_tables(supernet, corpus: TokenizedCorpus, batches: int = 4, batch_size: int = 8,
                   seq_len: int = 32, rng_seed: int = 0, inputs: list[np.ndarray] | None = None
                   ) -> ImportanceTables:
    """Activation statistics of the full network on fixed batches.

    FFN neuron: mean |x_norm . w1_i| over batch and positions. Embedding
    channel: mean |norm output| over batch, positions and every norm layer.
    Head: mean L2 norm of the head's attention output. Block: one minus the
    mean cosine similarity between block input and output.
    """
    sup = supernet.config
    if inputs is None:
        if corpus.vocab_size > sup.vocab_size:
            raise ValidationError(f"corpus vocabulary {corpus.vocab_size} exceeds model vocabulary {sup.vocab_size}")
        inputs = [sample_batch(corpus, batch_size, seq_len, [rng_seed, i])[0] for i in range(batches)]
    L = sup.n_layer
    ffn = [np.zeros(sup.intermediate_size) for _ in range(L)]
    heads = [np.zeros(sup.n_head) for _ in range(L)]
    emb = np.zeros(sup.n_embd)
    blocks = np.zeros(L)
    prev = supernet.active
    supernet.reset_super_network()
    try:
        for x in inputs:
            rec: dict = {}
            with ad.no_grad():
                supernet.forward(x, record=rec)
            for i in range(L):
                ffn[i] += np.abs(rec["mlp_pre"][i]).mean(axis=(0, 1))
                heads[i] += np.linalg.norm(rec["head_out"][i], axis=-1).mean(axis=(0, 1))
                a, b = rec["block_in"][i], rec["block_out"][i]
                # sqrt of the product keeps an unchanged block at exactly 0
                cos = (a * b).sum(-1) / np.sqrt((a * a).sum(-1) * (b * b).sum(-1))
                blocks[i] += 1.0 - cos.mean()
            emb += np.mean([np.abs(n).mean(axis=(0, 1)) for n in rec["norm_out"]], axis=0)
    finally:
        if prev is not None:
            supernet.set_sub_network(prev)
    n = len(inputs)
    return ImportanceTables([f / n for f in ffn], emb / n, [h / n for h in heads], blocks / n, ACTIVATION)


def weight_magnitude_tables(supernet) -> ImportanceTables:
    """Mean absolute value of the weights each unit owns."""
    sup = supernet.config
    P = {k: v.data for k, v in supernet.params.items()}
    Hs, G = sup.head_size, sup.heads_per_group
    ffn, heads, blocks = [], [], []
    for i in range(sup.n_layer):
        p = f"h.{i}"
        w1, w2 = np.abs(P[f"{p}.mlp.w1"]), np.abs(P[f"{p}.mlp.w2"])
        ffn.append((w1.sum(axis=1) + w2.sum(axis=0)) / (w1.shape[1] + w2.shape[0]))
        wq, wk, wv, wo = (np.abs(P[f"{p}.attn.{n}"]) for n in ("wq", "wk", "wv", "wo"))
        hs = []
        for hd in range(sup.n_head):
            g = hd // G
            parts = [wq[hd * Hs:(hd + 1) * Hs], wk[g * Hs:(g + 1) * Hs], wv[g * Hs:(g + 1) * Hs],
                     wo[:, hd * Hs:(hd + 1) * Hs]]
            hs.append(sum(x.sum() for x in parts) / sum(x.size for x in parts))
        heads.append(np.asarray(hs))
        owned = [np.abs(v) for k, v in P.items() if k.startswith(p + ".")]
        blocks.append(sum(x.sum() for x in owned) / sum(x.size for x in owned))
    gains = [np.abs(v) for k, v in P.items() if k.endswith(".g")]
    wte = np.abs(P["wte"])
    emb = (wte.sum(axis=0) + sum(gains)) / (wte.shape[0] + len(gains))
    return ImportanceTables(ffn, emb, heads, np.asarray(blocks), WEIGHT)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def _selected(cfg: SubnetworkConfig, sup: SupernetConfig):
    """(layer ids, emb ids, per-layer head ids, per-layer ffn ids)."""
    from .model import _selection

    layers, emb, per_layer = _selection(cfg, sup)
    return layers, emb, [p[0] for p in per_layer], [p[3] for p in per_layer]


def score_subnetwork(tables: ImportanceTables, cfg: SubnetworkConfig, sup: SupernetConfig) -> float:
    """Sum of softmax-normalised scores of the kept units; higher is better."""
    tables.check(sup)
    cfg.validate(sup)
    layers, emb, heads, ffn = _selected(cfg, sup)
    total = float(_softmax(tables.emb)[emb].sum())
    total += float(_softmax(tables.blocks)[layers].sum())
    for li, hs, ds in zip(layers, heads, ffn):
        total += float(_softmax(tables.heads[li])[hs].sum())
        total += float(_softmax(tables.ffn[li])[ds].sum())
    return total


class ImportanceFitness:
    """Negated sub-network importance, so lower is better like perplexity."""

    def __init__(self, tables: ImportanceTables, sup: SupernetConfig):
        tables.check(sup)
        self.tables = tables
        self.sup = sup

    def __call__(self, cfg: SubnetworkConfig) -> float:
        return -score_subnetwork(self.tables, cfg, self.sup)
