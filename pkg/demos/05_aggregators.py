"""Gate vs averaging vs static validation weighting on one trained model.

All the combiners share the same three experts; only the mixing rule
changes. The static weights come from each expert's reconstruction quality
on the validation carve, which is the standard frozen-weights baseline the
adaptive gate is meant to beat.
"""

from densemble.aggregation import (
    average_ranker,
    bma_ranker,
    bma_weights,
    expert_validation_losses,
    single_expert_ranker,
)
from densemble.dataset import split_train_test, synthetic_interactions
from densemble.evaluation import GatedEnsembleRanker, evaluate
from densemble.training import TrainConfig, initialize_run, train, validation_carve

matrix = synthetic_interactions(num_users=300, num_items=120, seed=23, density=0.12)
split = split_train_test(matrix, ratio=0.8, seed=0)
model, gating = initialize_run(matrix.num_users, matrix.num_items,
                               dims=(32, 12, 4), k=2, seed=0)
train(model, gating, split, TrainConfig(epochs=40, batch_size=64, k=2, seed=0,
                                        early_stop_patience=15))

carve = validation_carve(split.train, seed=0)
losses = expert_validation_losses(model, carve.train, carve.test)
weights = bma_weights(losses, temperature=1.0)
print("validation reconstruction loss per expert:")
for name, loss, w in zip(("mild", "moderate", "strong"), losses, weights):
    print(f"  {name:8s} loss {loss:.5f} -> static weight {w:.3f}")

rankers = {
    "gate": GatedEnsembleRanker(model, gating),
    "average": average_ranker(model),
    "bma": bma_ranker(model, carve.train, carve.test, temperature=1.0),
    "mild": single_expert_ranker(model, "mild"),
    "moderate": single_expert_ranker(model, "moderate"),
    "strong": single_expert_ranker(model, "strong"),
}
print("\nheld-out Recall@5 / MRR@5 by combiner:")
for name, ranker in rankers.items():
    metrics = evaluate(ranker, split, cutoffs=(5,))
    print(f"  {name:8s} R@5 {metrics.recall[5]:.4f}  MRR@5 {metrics.mrr[5]:.4f}")
