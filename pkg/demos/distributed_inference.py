"""
Two-node inference over TCP
===========================

Starts two workers on loopback (2 and 3 models), lets the master collect
their node-level votes, and checks the combined answer against the
in-process hierarchical vote.
"""

import tempfile
from pathlib import Path

from prune2edge import edgenet, poolgen, store, voter
from prune2edge.cli import render_latency_table

root = Path(tempfile.mkdtemp(prefix="edge-"))
ds = store.gen_dataset("blobs", 27000, 4, 2.0, seed=3, path=root / "data.p2ed")
poolgen.generate_pool(ds, 5, base_seed=3, out_dir=root / "pool")
paths = [str(root / "pool" / f"model_{i:03d}.json") for i in range(5)]

# each worker holds a full copy of the dataset; only indices cross the wire
a = edgenet.start_worker(edgenet.NodeConfig("node-a", paths[:2], str(root / "data.p2ed")))
b = edgenet.start_worker(edgenet.NodeConfig("node-b", paths[2:], str(root / "data.p2ed")))

reports = []
for n in (1, 10, 100):
    reports.append(edgenet.run_master([a.address, b.address], n, dataset=ds).to_dict())
print(render_latency_table(reports))

xt, _ = ds.split("test")
oracle = voter.hierarchical_predictions([voter.load_members(paths[:2]), voter.load_members(paths[2:])], xt[:100])
print("matches in-process hierarchical vote:", reports[-1]["predictions"] == oracle.tolist())

for server in (a, b):
    server.shutdown()
    server.server_close()
