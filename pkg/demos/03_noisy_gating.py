"""How the gate routes inputs: noisy scores, top-k survival, load odds.

The gate is linear in the interaction vector, perturbed during training by
Gaussian noise whose scale is itself learned. Only the top k scores survive
into a softmax, so the loser weights are exactly zero, and the selection
probabilities that back the load-balancing loss are plain normal CDFs.
"""

import numpy as np

from densemble.gating import GatingParams, gate_forward, load_probability
from densemble.numerics import make_rng

num_items, num_experts, k = 12, 3, 2
gating = GatingParams(
    w_gate=make_rng(0).normal(scale=0.6, size=(num_items, num_experts)),
    w_noise=make_rng(1).normal(scale=0.4, size=(num_items, num_experts)),
    k=k,
)
x = make_rng(2).random(num_items)

clean = gate_forward(gating, x)
print("clean scores:   ", np.round(clean.clean_scores, 3))
print("inference weights", np.round(clean.weights, 3),
      f"<- exactly {k} nonzero, sum {clean.weights.sum():.10f}")

# With an RNG the scores are perturbed, so selection can differ draw to draw.
picks = {}
for trial in range(2000):
    decision = gate_forward(gating, x, make_rng(3, trial))
    chosen = tuple(sorted(int(i) for i in decision.selected))
    picks[chosen] = picks.get(chosen, 0) + 1
print("\nselected pairs over 2000 noisy draws:")
for pair, count in sorted(picks.items(), key=lambda kv: -kv[1]):
    print(f"  experts {pair}: {count / 2000:.1%}")

# load_probability is the closed form for "expert i survives a redraw of its
# OWN noise with the other scores pinned". Simulate exactly that quantity.
print("\nper-expert selection probability, own noise redrawn:")
scores = clean.clean_scores
scales = clean.noise_scales
draws = make_rng(4).standard_normal(50_000)
for expert in range(num_experts):
    p = load_probability(gating, x, expert)
    others = np.delete(scores, expert)
    threshold = np.sort(others)[-k]
    mc = float(np.mean(scores[expert] + draws * scales[expert] > threshold))
    print(f"  expert {expert}: closed form {p:.3f}, Monte Carlo {mc:.3f}")
