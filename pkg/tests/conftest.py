"""Shared fixtures: the MovieLens path and a per-session cache of trained models.

The heavier end-to-end checks all train on MovieLens 100K with slightly
different settings. Training is deterministic, so one (k, noise_rate, seed)
model can back several checks; the cache trains each combination at most once.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from densemble.dataset import (
    InteractionMatrix,
    SplitDataset,
    inject_noise,
    load_interactions,
    split_train_test,
)
from densemble.evaluation import GatedEnsembleRanker, MetricsReport, evaluate
from densemble.gating import GatingParams
from densemble.model import DenoiserStack
from densemble.training import TrainConfig, TrainReport, initialize_run, train

ML100K = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"


def pytest_collection_modifyitems(config, items):
    if ML100K.exists():
        return
    skip = pytest.mark.skip(reason=f"MovieLens file not found at {ML100K}")
    for item in items:
        if "movielens" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def ml100k_split() -> SplitDataset:
    matrix, _ = load_interactions(ML100K)
    return split_train_test(matrix, 0.8, 0)


def _strip_overlap(test: InteractionMatrix, noisy_train: InteractionMatrix) -> InteractionMatrix:
    rows = [np.setdiff1d(test.rows[u], noisy_train.rows[u])
            for u in range(test.num_users)]
    return InteractionMatrix.from_rows(test.num_users, test.num_items, rows)


@dataclass
class TrainedRun:
    model: DenoiserStack
    gating: GatingParams
    split: SplitDataset
    report: TrainReport
    gate_metrics: MetricsReport


class RunCache:
    """Trains MovieLens models on demand, once per (k, rate, seed)."""

    def __init__(self, split: SplitDataset):
        self.base_split = split
        self._runs: dict[tuple, TrainedRun] = {}
        self._noisy_splits: dict[float, SplitDataset] = {0.0: split}

    def noisy_split(self, rate: float) -> SplitDataset:
        if rate not in self._noisy_splits:
            noisy_train = inject_noise(self.base_split.train, rate, 0)
            self._noisy_splits[rate] = SplitDataset(
                noisy_train, _strip_overlap(self.base_split.test, noisy_train))
        return self._noisy_splits[rate]

    def run(self, k: int = 2, rate: float = 0.0, seed: int = 0) -> TrainedRun:
        key = (k, float(rate), seed)
        if key not in self._runs:
            split = self.noisy_split(float(rate))
            model, gating = initialize_run(
                split.train.num_users, split.train.num_items, (128, 48, 12), k, seed)
            report = train(model, gating, split, TrainConfig(k=k, seed=seed))
            metrics = evaluate(GatedEnsembleRanker(model, gating), split, seed=seed)
            self._runs[key] = TrainedRun(model, gating, split, report, metrics)
        return self._runs[key]


@pytest.fixture(scope="session")
def ml_runs(ml100k_split) -> RunCache:
    return RunCache(ml100k_split)
