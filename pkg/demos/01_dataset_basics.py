"""Loading interactions, splitting them, and injecting false positives.

Runs on a generated dataset so it needs no downloads. Point LOAD_PATH at a
real file (one `user<tab>item` pair per line, ratings column ignored) to see
the same walkthrough on your own data.
"""

from pathlib import Path
from tempfile import TemporaryDirectory

from densemble.dataset import (
    inject_noise,
    load_interactions,
    sparsity,
    split_train_test,
    synthetic_interactions,
    write_interactions,
)

matrix = synthetic_interactions(num_users=100, num_items=60, seed=7, density=0.1)
print(f"synthetic corpus: {matrix.num_users} users x {matrix.num_items} items, "
      f"{matrix.num_interactions} positives, sparsity {sparsity(matrix):.4f}")

# Round-trip through the on-disk format the CLI consumes.
with TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.tsv"
    write_interactions(path, matrix)
    reloaded, idmap = load_interactions(path)
    print(f"round trip through {path.name}: "
          f"{reloaded.num_interactions} positives, ids preserved via {type(idmap).__name__}")

# Per-user 80/20 split; every user keeps ceil(0.8 * n) items in train.
split = split_train_test(matrix, ratio=0.8, seed=0)
u = 0
print(f"user {u}: {matrix.rows[u].size} items -> "
      f"{split.train.rows[u].size} train + {split.test.rows[u].size} test")

# Noise injection flips random zero cells to one: simulated accidental clicks.
for rate in (0.25, 1.0):
    noisy = inject_noise(split.train, rate, seed=0)
    added = noisy.num_interactions - split.train.num_interactions
    print(f"rate {rate}: injected {added} false positives "
          f"({added / split.train.num_interactions:.0%} of train)")
