"""Noise-aware training for implicit-feedback recommenders.

Sifts each mini-batch into clean, noisy and hard samples: high-loss
samples are flagged, the stable ones among them are rescued with a
preference scorer, and the rest are dropped before the gradient step.
"""

__version__ = "0.1.0"

from .data import Dataset, Interaction, ItemProfile, SplitDataset, inject_noise, load_interactions, split
from .denoise import ScheduleConfig, epsilon_l, epsilon_neg, epsilon_pair, epsilon_pos
from .errors import (
    DataFormatError,
    HardsiftError,
    RemoteEndpointError,
    ScoringUnavailable,
    ValidationError,
)
from .evaluation import evaluate_split, ndcg_at_k, pattern_trace, recall_at_k
from .scorer import CachedScorer, OracleScorer, RemoteScorer, score, score_many
from .synth import generate_world, load_world, save_world
from .trainer import Ablation, RunConfig, train

__all__ = [
    "Ablation",
    "CachedScorer",
    "Dataset",
    "DataFormatError",
    "HardsiftError",
    "Interaction",
    "ItemProfile",
    "OracleScorer",
    "RemoteEndpointError",
    "RemoteScorer",
    "RunConfig",
    "ScheduleConfig",
    "ScoringUnavailable",
    "SplitDataset",
    "ValidationError",
    "epsilon_l",
    "epsilon_neg",
    "epsilon_pair",
    "epsilon_pos",
    "evaluate_split",
    "generate_world",
    "inject_noise",
    "load_interactions",
    "load_world",
    "ndcg_at_k",
    "pattern_trace",
    "recall_at_k",
    "save_world",
    "score",
    "score_many",
    "split",
    "train",
]
