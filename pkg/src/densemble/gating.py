"""Sparse gating: noisy top-k expert selection and balancing losses.

Scores are linear in the input; during training each score gets Gaussian
noise whose scale is itself learned (softplus of a second linear map).
Only the top k scores survive into a softmax, so exactly k experts receive
nonzero weight per input. Two auxiliary losses penalize the squared
coefficient of variation of summed weights (importance) and of smoothed
selection probabilities (load), keeping expert usage balanced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from densemble.numerics import coefficient_of_variation, softplus, std_normal_cdf


@dataclass
class GatingParams:
    """Linear gate and noise-scale matrices, both shaped (num_items, E)."""

    w_gate: np.ndarray
    w_noise: np.ndarray
    k: int

    def __post_init__(self):
        if self.w_gate.shape != self.w_noise.shape or self.w_gate.ndim != 2:
            raise ValueError("gate and noise matrices must share a 2-D shape")
        if not 1 <= self.k <= self.num_experts:
            raise ValueError(f"k={self.k} out of range for {self.num_experts} experts")

    @property
    def num_experts(self) -> int:
        return self.w_gate.shape[1]

    @classmethod
    def zeros(cls, num_items: int, num_experts: int = 3, k: int = 2) -> "GatingParams":
        # Zero init scores every expert equally at the start of training.
        return cls(w_gate=np.zeros((num_items, num_experts)),
                   w_noise=np.zeros((num_items, num_experts)), k=k)

    def parameters(self) -> dict:
        return {"gate.weight": self.w_gate, "gate.noise": self.w_noise}


@dataclass
class GateDecision:
    """Everything one gate evaluation produced; fields are (..., E) arrays.

    `selected` holds the k chosen expert indices per input in descending
    score order. `weights` is zero exactly off the selected set.
    """

    weights: np.ndarray
    clean_scores: np.ndarray
    noise_scales: np.ndarray
    noisy_scores: np.ndarray
    selected: np.ndarray


def _top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # Stable argsort of the negated scores: ties break toward lower index.
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def keep_top_k(scores, k: int):
    """Keep the k largest entries (ties to the lower index), others -> -inf."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[-1]:
        raise ValueError(f"k={k} out of range for {scores.shape[-1]} entries")
    top = _top_k_indices(scores, k)
    out = np.full_like(scores, -np.inf)
    np.put_along_axis(out, top, np.take_along_axis(scores, top, axis=-1), axis=-1)
    return out


def gate_forward(gating: GatingParams, x, rng: np.random.Generator | None = None) -> GateDecision:
    """Score, perturb (training only), select top k, softmax the survivors.

    With `rng` given, scores become clean + eps * scale with standard-normal
    eps (one draw per expert per input). Without it the clean scores rank
    directly, so inference is deterministic. Accepts a single vector or a
    batch of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gating.w_gate.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != gate input {gating.w_gate.shape[0]}")
    clean = x @ gating.w_gate
    scales = softplus(x @ gating.w_noise)
    if rng is not None:
        noisy = clean + rng.standard_normal(clean.shape) * scales
    else:
        noisy = clean.copy()
    selected = _top_k_indices(noisy, gating.k)
    picked = np.take_along_axis(noisy, selected, axis=-1)
    # Softmax over just the survivors: equivalent to softmax(keep_top_k(.)),
    # but the losers come out exactly 0.
    picked = picked - picked.max(axis=-1, keepdims=True)
    e = np.exp(picked)
    weights = np.zeros_like(noisy)
    np.put_along_axis(weights, selected, e / e.sum(axis=-1, keepdims=True), axis=-1)
    return GateDecision(weights=weights, clean_scores=clean, noise_scales=scales,
                        noisy_scores=noisy, selected=selected)


def combine(decision: GateDecision, expert_outputs):
    """Weighted sum of expert outputs under a gate decision.

    Entries of `expert_outputs` may be None for experts that were never
    selected (they need not be evaluated); a None output for a selected
    expert is an error.
    """
    weights = decision.weights
    if len(expert_outputs) != weights.shape[-1]:
        raise ValueError("one output slot per expert required")
    result = None
    for i, out in enumerate(expert_outputs):
        w = weights[..., i]
        if not np.any(w > 0):
            continue
        if out is None:
            raise ValueError(f"expert {i} is selected but has no output")
        term = w[..., None] * np.asarray(out, dtype=np.float64)
        result = term if result is None else result + term
    if result is None:
        raise ValueError("no expert carries positive weight")
    return result


def _stack_weights(batch_decisions) -> np.ndarray:
    if isinstance(batch_decisions, GateDecision):
        return np.atleast_2d(batch_decisions.weights)
    weights = [np.asarray(d.weights, dtype=np.float64) for d in batch_decisions]
    if not weights:
        raise ValueError("empty batch of gate decisions")
    return np.vstack([np.atleast_2d(w) for w in weights])


def importance_loss(batch_decisions, w_importance: float) -> float:
    """w_i * CV(per-expert summed gate weight over the batch)^2."""
    weights = _stack_weights(batch_decisions)
    importance = weights.sum(axis=0)
    return w_importance * coefficient_of_variation(importance) ** 2


@dataclass
class LoadEstimate:
    """Smoothed selection probabilities for a batch, plus backward bookkeeping.

    For expert i the probability of selection is Phi((clean_i - T_i) / s_i)
    where T_i is the k-th highest noisy score among the *other* experts:
    the score at sorted position k when i itself sits in the top k, else the
    score at position k-1. `cut_index`/`next_index` record which expert holds
    each of those positions so gradients can be routed back to it.
    """

    probabilities: np.ndarray  # (B, E)
    zscores: np.ndarray        # (B, E) argument passed to the normal CDF
    thresholds: np.ndarray     # (B, E)
    in_top_k: np.ndarray       # (B, E) bool
    cut_index: np.ndarray      # (B,) expert at sorted position k-1
    next_index: np.ndarray     # (B,) expert at sorted position k


def load_estimate(clean_scores, noise_scales, noisy_scores, k: int) -> LoadEstimate:
    clean = np.atleast_2d(np.asarray(clean_scores, dtype=np.float64))
    scales = np.atleast_2d(np.asarray(noise_scales, dtype=np.float64))
    noisy = np.atleast_2d(np.asarray(noisy_scores, dtype=np.float64))
    num_experts = clean.shape[-1]
    if not 1 <= k < num_experts:
        raise ValueError("load estimate requires 1 <= k < num_experts")
    order = np.argsort(-noisy, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(num_experts)[None, :], axis=-1)
    in_top_k = ranks < k
    sorted_noisy = np.take_along_axis(noisy, order, axis=-1)
    # Positions k-1 and k never coincide with the candidate expert itself:
    # a top-k candidate ranks above k, an excluded one ranks at or below it.
    thresholds = np.where(in_top_k, sorted_noisy[:, k, None], sorted_noisy[:, k - 1, None])
    with np.errstate(divide="ignore", over="ignore"):
        zscores = np.where(scales > 0, (clean - thresholds) / np.maximum(scales, 1e-300),
                           np.where(clean > thresholds, np.inf, -np.inf))
    return LoadEstimate(probabilities=std_normal_cdf(zscores), zscores=zscores,
                        thresholds=thresholds, in_top_k=in_top_k,
                        cut_index=order[:, k - 1], next_index=order[:, k])


def load_probability(gating: GatingParams, x, expert: int, noisy_scores=None) -> float:
    """Probability that `expert` lands in the top k when its own noise is
    redrawn, the other scores held at `noisy_scores` (clean scores when not
    given). Identically 1 when k equals the expert count."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= expert < gating.num_experts:
        raise ValueError(f"expert index {expert} out of range")
    if gating.k >= gating.num_experts:
        return 1.0
    clean = x @ gating.w_gate
    scales = softplus(x @ gating.w_noise)
    noisy = clean if noisy_scores is None else np.asarray(noisy_scores, dtype=np.float64)
    est = load_estimate(clean, scales, noisy, gating.k)
    return float(est.probabilities[0, expert])


def load_loss(gating: GatingParams, batch_inputs, w_load: float) -> float:
    """w_l * CV(per-expert summed selection probability over the batch)^2."""
    x = np.atleast_2d(np.asarray(batch_inputs, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if gating.k >= gating.num_experts:
        return 0.0  # every expert is always selected; load is uniform
    clean = x @ gating.w_gate
    scales = softplus(x @ gating.w_noise)
    est = load_estimate(clean, scales, clean, gating.k)
    load = est.probabilities.sum(axis=0)
    return w_load * coefficient_of_variation(load) ** 2
