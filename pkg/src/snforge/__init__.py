"""Supernet sub-network search, extraction and small-model training at toy scale."""

from .config import DenseArch, LayerArch, ParamBin, SubnetworkConfig, SupernetConfig
from .data import TokenizedCorpus, detokenize, load_corpus, sample_batch, save_corpus, tokenize_bytes
from .evolution import EvoParams, crossover, constrain, mutate, run_search
from .fitness import PerplexityFitness, evaluate_fitness
from .importance import ImportanceFitness, ImportanceTables, compute_tables, score_subnetwork, weight_magnitude_tables
from .losses import DistillSpec, combined_loss, forward_kl, topk_kl
from .model import DenseModel, Supernet, count_params, extract_dense
from .space import SearchSpace, cardinality, sample, validate
from .train import TrainSpec, distill, evaluate_perplexity, pretrain

__version__ = "0.1.0"

__all__ = [
    "DenseArch",
    "DenseModel",
    "DistillSpec",
    "EvoParams",
    "ImportanceFitness",
    "ImportanceTables",
    "LayerArch",
    "ParamBin",
    "PerplexityFitness",
    "SearchSpace",
    "SubnetworkConfig",
    "Supernet",
    "SupernetConfig",
    "TokenizedCorpus",
    "TrainSpec",
    "cardinality",
    "combined_loss",
    "compute_tables",
    "constrain",
    "count_params",
    "crossover",
    "detokenize",
    "distill",
    "evaluate_fitness",
    "evaluate_perplexity",
    "extract_dense",
    "forward_kl",
    "load_corpus",
    "mutate",
    "pretrain",
    "run_search",
    "sample",
    "sample_batch",
    "save_corpus",
    "score_subnetwork",
    "tokenize_bytes",
    "topk_kl",
    "validate",
    "weight_magnitude_tables",
]
