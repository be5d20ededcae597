"""Denoising-autoencoder ensemble for implicit-feedback top-N recommendation.

Three parameter-sharing autoencoder levels (large/medium/small) are composed
into three denoising experts of increasing depth (mild/moderate/strong). A
noisy top-k gate routes each user vector to a sparse subset of experts, with
importance/load auxiliary losses keeping the routing balanced.
"""

from densemble.dataset import (
    DatasetError,
    IdMap,
    InteractionMatrix,
    SplitDataset,
    inject_noise,
    load_interactions,
    sparsity,
    split_train_test,
    synthetic_interactions,
    write_interactions,
)
from densemble.gating import GateDecision, GatingParams, gate_forward, keep_top_k
from densemble.model import (
    CheckpointError,
    DenoiserStack,
    ParentComposition,
    count_parameters,
    load_checkpoint,
    parent_forward,
    save_checkpoint,
)
from densemble.training import TrainConfig, TrainingDivergedError, train
from densemble.evaluation import MetricsReport, Ranker, evaluate

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DatasetError",
    "DenoiserStack",
    "GateDecision",
    "GatingParams",
    "IdMap",
    "InteractionMatrix",
    "MetricsReport",
    "ParentComposition",
    "Ranker",
    "SplitDataset",
    "TrainConfig",
    "TrainingDivergedError",
    "count_parameters",
    "evaluate",
    "gate_forward",
    "inject_noise",
    "keep_top_k",
    "load_checkpoint",
    "load_interactions",
    "parent_forward",
    "save_checkpoint",
    "sparsity",
    "split_train_test",
    "synthetic_interactions",
    "train",
    "write_interactions",
]
