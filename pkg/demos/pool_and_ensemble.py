"""
From model pool to ensemble
===========================

Trains a pool with randomized hyperparameters, clusters the members by how
they behave on the pruning set, and compares the two selection strategies
against the pool's median member.
"""

import tempfile

import numpy as np

from prune2edge import ensel, nncore, poolgen, store, voter

ds = store.gen_dataset("blobs", 27000, 4, 2.0, seed=2)
out = tempfile.mkdtemp(prefix="pool-")
manifest = poolgen.generate_pool(ds, 10, base_seed=2, out_dir=out)
_, models = poolgen.load_pool(f"{out}/manifest.json")

for e in poolgen.ok_entries(manifest):
    hp = e["hyperparams"]
    print(f"model {e['model_id']:2d}: {hp['loss']:<24} {hp['optimizer']:<4} bs={hp['batch_size']:<3}"
          f" s_f={hp['final_sparsity']:.2f}  pruning acc {e['pruning_accuracy']:.4f}")

# one feature vector per model: its probability for the most confident class of each sample
ids = sorted(models)
xp, _ = ds.split("pruning")
matrix = ensel.build_cluster_matrix(ensel.predict_pool([models[m] for m in ids], xp))
acc = {e["model_id"]: e["pruning_accuracy"] for e in manifest["entries"]}
assignment = ensel.cluster_pool(matrix, 3, seed=2, accuracies=[acc[m] for m in ids], model_ids=ids)
for c in assignment.cluster_ranking():
    print(f"cluster {c}: mean accuracy {assignment.cluster_accuracy[c]:.4f}, members {assignment.members[c]}")

xt, yt = ds.split("test")
print(f"pool median test accuracy: {np.median([nncore.accuracy(models[m], xt, yt) for m in ids]):.4f}")
for strategy in ensel.STRATEGIES:
    chosen = ensel.select(assignment, strategy, 3)
    ens_acc, _ = voter.evaluate_ensemble([models[m] for m in chosen], xt, yt)
    print(f"{strategy}: members {chosen}, ensemble test accuracy {ens_acc:.4f}")
