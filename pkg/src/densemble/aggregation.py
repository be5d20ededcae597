"""Alternative combiners over the same three experts: plain averaging,
static validation-weighted averaging, and single-expert rankers.

These are the baselines the adaptive sparse gate is compared against. The
static weights are computed once on the validation carve-out and frozen,
so they cannot adapt per input; that rigidity is the point of the baseline.
"""

from __future__ import annotations

import numpy as np

from densemble.dataset import DatasetError, InteractionMatrix
from densemble.evaluation import Ranker
from densemble.model import PARENT_NAMES, DenoiserStack, parent_forward
from densemble.numerics import mse, softmax


def average_combine(expert_outputs):
    """Elementwise mean of the three expert outputs."""
    if len(expert_outputs) != 3:
        raise ValueError("expected exactly three expert outputs")
    arrays = [np.asarray(o, dtype=np.float64) for o in expert_outputs]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ValueError("expert outputs must share a shape")
    return (arrays[0] + arrays[1] + arrays[2]) / 3.0


def bma_weights(validation_losses, temperature: float = 1.0) -> np.ndarray:
    """Static expert weights proportional to exp(-loss / temperature)."""
    losses = np.asarray(validation_losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("validation losses must be finite")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return softmax(-losses / temperature)


class SingleExpertRanker(Ranker):
    """Scores through one expert path alone."""

    def __init__(self, model: DenoiserStack, parent_name: str):
        self.model = model
        self.parent = model.parent(parent_name)

    def score_matrix(self, users, x):
        return parent_forward(self.model, self.parent,
                              np.asarray(users, dtype=np.int64),
                              np.asarray(x, dtype=np.float64))


class StaticWeightRanker(Ranker):
    """Fixed convex combination of all three experts (uniform = averaging)."""

    def __init__(self, model: DenoiserStack, weights):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(model.parents),):
            raise ValueError("one weight per expert required")
        if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")
        self.model = model
        self.weights = weights

    def score_matrix(self, users, x):
        users = np.asarray(users, dtype=np.int64)
        x = np.asarray(x, dtype=np.float64)
        result = np.zeros_like(np.atleast_2d(x))
        for w, parent in zip(self.weights, self.model.parents):
            if w == 0.0:
                continue
            result += w * parent_forward(self.model, parent, users, x)
        return result


def single_expert_ranker(model: DenoiserStack, parent_name: str) -> SingleExpertRanker:
    return SingleExpertRanker(model, parent_name)


def average_ranker(model: DenoiserStack) -> StaticWeightRanker:
    n = len(model.parents)
    return StaticWeightRanker(model, np.full(n, 1.0 / n))


def expert_validation_losses(model: DenoiserStack, train_matrix: InteractionMatrix,
                             val_matrix: InteractionMatrix) -> np.ndarray:
    """Per-expert reconstruction MSE on users holding validation items.

    Input is the raw train row; the target is the union of train and
    validation positives, so an expert is rewarded for generalizing to the
    held-out items rather than memorizing its input.
    """
    users = np.asarray([u for u in range(val_matrix.num_users)
                        if val_matrix.rows[u].size > 0], dtype=np.int64)
    if users.size == 0:
        raise DatasetError("no users with validation items to weight experts")
    x = train_matrix.dense(users)
    target = x + val_matrix.dense(users)  # rows are disjoint, so this is a union
    return np.asarray([mse(parent_forward(model, parent, users, x), target)
                       for parent in model.parents])


def bma_ranker(model: DenoiserStack, train_matrix: InteractionMatrix,
               val_matrix: InteractionMatrix, temperature: float = 1.0) -> StaticWeightRanker:
    """Static ranker weighted by validation reconstruction quality."""
    losses = expert_validation_losses(model, train_matrix, val_matrix)
    return StaticWeightRanker(model, bma_weights(losses, temperature))


AGGREGATOR_NAMES = ("gate", "average", "bma") + PARENT_NAMES
