"""The three experts are prefixes of one shared stack, not three models.

Mild decodes straight out of the large level; Moderate detours through
medium; Strong goes all the way down to the narrowest bottleneck. Because
the levels are shared, the whole ensemble costs barely more than one deep
autoencoder. The script shows both the routing and the exact accounting.
"""

import numpy as np

from densemble.model import (
    DenoiserStack,
    count_parameters,
    parameter_breakdown,
    parent_forward,
)
from densemble.numerics import make_rng

model = DenoiserStack.initialize(num_users=50, num_items=40, dims=(16, 8, 4),
                                 rng=make_rng(0))

for parent in model.parents:
    widths = " -> ".join(str(level.hidden_dim)
                         for level in model.levels[:parent.depth])
    print(f"{parent.name:8s} encodes through widths {widths}, "
          f"then decodes back to {model.num_items}")

# Same storage: nudging the large encoder moves every expert's output.
x = make_rng(1).random((1, 40))
users = np.array([0])
before = {p.name: parent_forward(model, p, users, x) for p in model.parents}
model.levels[0].encoder.weight[0, 0] += 0.5
after = {p.name: parent_forward(model, p, users, x) for p in model.parents}
for name in before:
    moved = float(np.max(np.abs(after[name] - before[name])))
    print(f"perturbing the shared large encoder moved {name} output by {moved:.2e}")

# Accounting at the sizes reported for the reference configuration.
print()
print("parameter accounting, 44784 users x 1020 items, dims (128, 48, 12):")
for key, value in parameter_breakdown(44784, 1020, (128, 48, 12)).items():
    print(f"  {key.replace('_', ' ')}: {value:,}")
assert count_parameters(44784, 1020, (128, 48, 12)) == 8_695_336

# Contrast with three unshared stacks of the same depths.
shared = count_parameters(44784, 1020, (128, 48, 12))
unshared = (count_parameters(44784, 1020, (128,))
            + count_parameters(44784, 1020, (128, 48))
            + count_parameters(44784, 1020, (128, 48, 12)))
print(f"\nshared stack: {shared:,} parameters; "
      f"three separate experts would need {unshared:,} "
      f"({unshared / shared:.2f}x)")
