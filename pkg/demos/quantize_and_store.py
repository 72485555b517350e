"""
Int8 quantization and the model file
====================================

Quantizes a pruned model, checks how often it agrees with the float model,
and compares the size of its file with a dense float32 file.
"""

import tempfile
from pathlib import Path

import numpy as np

from prune2edge import nncore, poolgen, quantizer, store

ds = store.gen_dataset("blobs", 27000, 4, 2.0, seed=1)
hp = poolgen.HyperParams(epochs=3, batch_size=64, loss="categorical_crossentropy", optimizer="adam",
                         initial_sparsity=0.3, final_sparsity=0.9, frequency=200, seed=1)

# pruned float model, then int8 weights calibrated on 128 pruning-set samples
float_model = poolgen.train_member(ds, hp, quantize=False)
xp, _ = ds.split("pruning")
q = quantizer.quantize_model(float_model, xp[:128])

for k, (qt, act) in enumerate(zip(q.qweights, q.act_params)):
    print(f"layer {k}: weight scale {qt.params.scale:.3e}, input scale {act.scale:.3e} zp {act.zero_point}")

xt, yt = ds.split("test")
agree = np.mean(nncore.predict_classes(float_model, xt) == nncore.predict_classes(q, xt))
print(f"float acc {nncore.accuracy(float_model, xt, yt):.4f}, int8 acc {nncore.accuracy(q, xt, yt):.4f},"
      f" argmax agreement {agree:.4f}")

# sparse int8 payloads keep only u32 index + i8 value per surviving weight
with tempfile.TemporaryDirectory() as tmp:
    size = store.save_model(q, Path(tmp) / "model.json")
    dense = len(store.model_bytes(q, dense_f32=True))
    print(f"file {size} bytes vs dense f32 {dense} bytes -> {size / dense:.1%}")
    assert store.models_equal(store.load_model(Path(tmp) / "model.json"), q)
