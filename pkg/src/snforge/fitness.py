"""Fitness functions for the search (lower is better)."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .config import SubnetworkConfig
from .data import TokenizedCorpus, validation_batches
from .errors import FitnessError
from .model import Supernet, extract_dense


class PerplexityFitness:
    """Validation perplexity of a sub-network on a fixed batch set.

    Candidates are evaluated on extracted dense copies, so a population can
    be scored from several threads without touching the supernet's
    activation state.
    """

    def __init__(self, supernet: Supernet, corpus: TokenizedCorpus, batches: int = 4,
                 batch_size: int = 8, seq_len: int = 32, workers: int | None = None):
        self.supernet = supernet
        self.batches = validation_batches(corpus, batches, batch_size, seq_len)
        self.workers = workers or int(os.environ.get("SNF_WORKERS", "1"))

    def _ppl(self, model) -> float:
        ces = []
        with ad.no_grad():
            for x, y in self.batches:
                ces.append(ad.cross_entropy(model(x), y).item())
        ce = float(np.mean(ces))
        if not math.isfinite(ce) or ce > 700.0:
            raise FitnessError(f"non-finite perplexity (mean cross-entropy {ce})")
        return math.exp(ce)

    def __call__(self, cfg: SubnetworkConfig) -> float:
        return self._ppl(extract_dense(self.supernet, cfg))

    def evaluate_many(self, cfgs: list[SubnetworkConfig]) -> list[float]:
        def one(cfg):
            try:
                return self(cfg)
            except FitnessError:
                return math.inf

        if self.workers <= 1 or len(cfgs) <= 1:
            return [one(c) for c in cfgs]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(one, cfgs))


def evaluate_fitness(cfg: SubnetworkConfig, metric) -> float:
    """Dispatch to a fitness object (``PerplexityFitness`` or ``ImportanceFitness``)."""
    return float(metric(cfg))
