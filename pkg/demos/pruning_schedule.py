"""
Gradual magnitude pruning
=========================

Trains a small MLP on blobs while the cubic schedule raises sparsity from
0.2 to 0.9, then shows that the masks froze at the final level.
"""

import math

import numpy as np

from prune2edge import nncore, pruner, store

# the schedule: 5 pruning events, one every 50 steps, starting at step 0
schedule = pruner.PruningSchedule(initial_sparsity=0.2, final_sparsity=0.9, start_step=0, n_steps=5, frequency=50)
for t in schedule.events():
    print(f"step {t:4d}  target sparsity {pruner.sparsity_at(schedule, t):.4f}")

# most of the pruning happens early, the curve flattens toward s_f
ds = store.gen_dataset("blobs", 3000, 3, 1.0, seed=0)
x, y = ds.split("train")
model = pruner.pruned_train(x, y, nncore.mlp_layers(2, [64, 32], 3), loss_kind="categorical_crossentropy",
                            optimizer=nncore.make_optimizer("adam"), schedule=schedule, epochs=6,
                            batch_size=32, seed=0)

# every tensor holds floor(0.9 * size) masked entries, all exactly +0.0
for k, (w, m) in enumerate(zip(model.weights, model.masks)):
    print(f"layer {k}: {w.size} weights, {int((m == 0).sum())} masked (floor = {math.floor(0.9 * w.size)}),"
          f" all zero: {bool(np.all(w[m == 0] == 0))}")

xt, yt = ds.split("test")
print(f"test accuracy at 90% sparsity: {nncore.accuracy(model, xt, yt):.4f}")
