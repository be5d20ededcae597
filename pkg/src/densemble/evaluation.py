"""Top-N ranking evaluation: Recall@N, Precision@N, MRR@N over held-out items.

Scoring uses the raw (uncorrupted) train vector as input; items the user
already interacted with in train are excluded from the ranking. Metrics are
averaged uniformly over users that have at least one held-out item.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from densemble.dataset import SplitDataset
from densemble.gating import GatingParams, gate_forward
from densemble.model import DenoiserStack, parent_forward


class Ranker:
    """Frozen scorer mapping (user, train vector) to scores over all items."""

    def score_matrix(self, users: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score(self, user: int, x: np.ndarray) -> np.ndarray:
        return self.score_matrix(np.asarray([user]), np.asarray(x)[None, :])[0]


class GatedEnsembleRanker(Ranker):
    """Scores via the sparse gate: only the selected experts run per user."""

    def __init__(self, model: DenoiserStack, gating: GatingParams):
        if gating.num_experts != len(model.parents):
            raise ValueError("gate width must match the number of experts")
        self.model = model
        self.gating = gating

    def score_matrix(self, users, x):
        users = np.asarray(users, dtype=np.int64)
        x = np.asarray(x, dtype=np.float64)
        decision = gate_forward(self.gating, x, rng=None)
        weights = np.atleast_2d(decision.weights)
        result = np.zeros_like(np.atleast_2d(x))
        for e, parent in enumerate(self.model.parents):
            picked = np.flatnonzero(weights[:, e] > 0)
            if picked.size == 0:
                continue
            out = parent_forward(self.model, parent, users[picked], x[picked])
            result[picked] += weights[picked, e, None] * out
        return result


def rank_items(ranker: Ranker, user: int, split: SplitDataset) -> np.ndarray:
    """All non-train items in descending score order, ties by ascending index."""
    test_row = split.test.rows[user]
    if test_row.size == 0:
        raise ValueError(f"user {user} has no test items")
    x = split.train.dense([user])[0]
    scores = ranker.score(user, x)
    return _order_row(scores, split.train.rows[user], split.train.num_items)


def _order_row(scores: np.ndarray, train_row: np.ndarray, num_items: int) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")  # stable: ties keep ascending index
    keep = np.ones(num_items, dtype=bool)
    keep[train_row] = False
    return order[keep[order]]


def recall_at(ranking, test_items, n: int) -> float:
    hits, num_test = _hits(ranking, test_items, n)
    return hits / num_test


def precision_at(ranking, test_items, n: int) -> float:
    hits, _ = _hits(ranking, test_items, n)
    return hits / n


def mrr_at(ranking, test_items, n: int) -> float:
    """Reciprocal rank of the first relevant item within the top n, else 0."""
    relevant = _as_set(test_items, n)
    for pos, item in enumerate(list(ranking)[:n], start=1):
        if int(item) in relevant:
            return 1.0 / pos
    return 0.0


def _as_set(test_items, n: int) -> set:
    if n < 1:
        raise ValueError("cutoff must be >= 1")
    relevant = set(int(i) for i in test_items)
    if not relevant:
        raise ValueError("empty test set")
    return relevant


def _hits(ranking, test_items, n: int):
    relevant = _as_set(test_items, n)
    top = set(int(i) for i in list(ranking)[:n])
    return len(top & relevant), len(relevant)


@dataclass
class MetricsReport:
    cutoffs: tuple
    recall: dict
    precision: dict
    mrr: dict
    users_evaluated: int
    seed: int | None = None


def evaluate(ranker: Ranker, split: SplitDataset, cutoffs=(5, 20),
             seed: int | None = None) -> MetricsReport:
    """Average the three ranking metrics uniformly over evaluable users."""
    cutoffs = tuple(int(n) for n in cutoffs)
    if not cutoffs or any(n < 1 for n in cutoffs):
        raise ValueError("cutoffs must be positive")
    users = np.asarray([u for u in range(split.test.num_users)
                        if split.test.rows[u].size > 0], dtype=np.int64)
    if users.size == 0:
        raise ValueError("no users with held-out items to evaluate")
    x = split.train.dense(users)
    scores = ranker.score_matrix(users, x)
    sums = {(m, n): 0.0 for m in ("recall", "precision", "mrr") for n in cutoffs}
    for b, u in enumerate(users):
        ranking = _order_row(scores[b], split.train.rows[u], split.train.num_items)
        test_row = split.test.rows[u]
        for n in cutoffs:
            sums[("recall", n)] += recall_at(ranking, test_row, n)
            sums[("precision", n)] += precision_at(ranking, test_row, n)
            sums[("mrr", n)] += mrr_at(ranking, test_row, n)
    count = float(users.size)
    return MetricsReport(
        cutoffs=cutoffs,
        recall={n: sums[("recall", n)] / count for n in cutoffs},
        precision={n: sums[("precision", n)] / count for n in cutoffs},
        mrr={n: sums[("mrr", n)] / count for n in cutoffs},
        users_evaluated=int(users.size),
        seed=seed,
    )


def metric_items(report: MetricsReport):
    """Flat ("metric@N", value) pairs in report order: recall, mrr, precision."""
    for name, table in (("recall", report.recall), ("mrr", report.mrr),
                        ("precision", report.precision)):
        for n in report.cutoffs:
            yield f"{name}@{n}", table[n]


@dataclass
class SeedAggregate:
    """Across-seed mean and population std for every flat metric key."""

    cutoffs: tuple
    mean: dict
    std: dict
    num_seeds: int


def aggregate_seeds(reports) -> SeedAggregate:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    cutoffs = reports[0].cutoffs
    if any(r.cutoffs != cutoffs for r in reports):
        raise ValueError("reports disagree on cutoffs")
    keys = [key for key, _ in metric_items(reports[0])]
    stacked = {key: [] for key in keys}
    for r in reports:
        for key, value in metric_items(r):
            stacked[key].append(value)
    mean = {key: float(np.mean(vals)) for key, vals in stacked.items()}
    std = {key: float(np.std(vals)) for key, vals in stacked.items()}
    return SeedAggregate(cutoffs=cutoffs, mean=mean, std=std, num_seeds=len(reports))


def metrics_json_text(report: MetricsReport, dataset: str, model: str, k: int) -> str:
    """The canonical metrics JSON document (deterministic key order and bytes)."""
    doc = {"dataset": dataset, "model": model,
           "seed": report.seed, "k": k}
    doc.update(metric_items(report))
    doc["users_evaluated"] = report.users_evaluated
    return json.dumps(doc, indent=2) + "\n"
