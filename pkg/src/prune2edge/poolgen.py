"""Generate a diverse pool of pruned, int8-quantized classifiers.

Every pool member is trained with its own randomly drawn training and
pruning hyperparameters.  Member seeds are derived from ``(base_seed, index)``
so members can be trained in any order or in parallel and still come out
bit-identical.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import nncore, pruner, quantizer, store
from .errors import ConfigError, PoolError, Prune2EdgeError
from .store import Dataset

log = logging.getLogger(__name__)

EPOCHS = (3, 4, 5, 6, 8)
BATCH_SIZES = (32, 64, 128)
LOSS_CHOICES = nncore.LOSSES
OPTIMIZER_CHOICES = nncore.OPTIMIZERS
INITIAL_SPARSITY = (0.1, 0.6)
FINAL_SPARSITY = (0.7, 0.9)
FREQUENCIES = (100, 200, 300, 400)

DEFAULT_HIDDEN = (256, 128)
CALIBRATION_SIZE = 128


@dataclass(frozen=True)
class HyperParams:
    epochs: int
    batch_size: int
    loss: str
    optimizer: str
    initial_sparsity: float
    final_sparsity: float
    frequency: int
    seed: int

    def __post_init__(self):
        checks = [
            (self.epochs in EPOCHS, "epochs"),
            (self.batch_size in BATCH_SIZES, "batch_size"),
            (self.loss in LOSS_CHOICES, "loss"),
            (self.optimizer in OPTIMIZER_CHOICES, "optimizer"),
            (INITIAL_SPARSITY[0] <= self.initial_sparsity <= INITIAL_SPARSITY[1], "initial_sparsity"),
            (FINAL_SPARSITY[0] <= self.final_sparsity <= FINAL_SPARSITY[1], "final_sparsity"),
            (self.frequency in FREQUENCIES, "frequency"),
        ]
        bad = [name for ok, name in checks if not ok]
        if bad:
            raise ConfigError(f"hyperparameters out of range: {', '.join(bad)}")
        if not self.initial_sparsity < self.final_sparsity:
            raise ConfigError("initial_sparsity must be below final_sparsity")


def sample_hyperparams(rng: np.random.Generator) -> HyperParams:
    return HyperParams(
        epochs=int(rng.choice(EPOCHS)),
        batch_size=int(rng.choice(BATCH_SIZES)),
        loss=str(rng.choice(LOSS_CHOICES)),
        optimizer=str(rng.choice(OPTIMIZER_CHOICES)),
        initial_sparsity=float(rng.uniform(*INITIAL_SPARSITY)),
        final_sparsity=float(rng.uniform(*FINAL_SPARSITY)),
        frequency=int(rng.choice(FREQUENCIES)),
        seed=int(rng.integers(2**31 - 1)),
    )


def member_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def schedule_for(hp: HyperParams, n_train: int) -> pruner.PruningSchedule:
    """Start at step 0 and fit as many events of ``hp.frequency`` as training allows."""
    total = hp.epochs * nncore.steps_per_epoch(n_train, hp.batch_size)
    n = total // hp.frequency
    if n < 1:
        raise ConfigError(
            f"{total} training steps cannot hold one pruning interval of {hp.frequency}; use more data"
        )
    return pruner.PruningSchedule(hp.initial_sparsity, hp.final_sparsity, 0, n, hp.frequency)


def train_member(dataset: Dataset, hp: HyperParams, hidden=DEFAULT_HIDDEN, *,
                 prune=True, quantize=True) -> nncore.Model:
    """One pool member: pruned training, then int8 quantization."""
    x, y = dataset.split("train")
    layers = nncore.mlp_layers(dataset.n_features, hidden, dataset.n_classes)
    optimizer = nncore.make_optimizer(hp.optimizer)
    if prune:
        model = pruner.pruned_train(x, y, layers, loss_kind=hp.loss, optimizer=optimizer,
                                    schedule=schedule_for(hp, len(x)), epochs=hp.epochs,
                                    batch_size=hp.batch_size, seed=hp.seed)
    else:
        model = nncore.init_model(layers, hp.seed)
        nncore.fit(model, x, y, loss_kind=hp.loss, optimizer=optimizer, epochs=hp.epochs,
                   batch_size=hp.batch_size, seed=hp.seed)
        model.metadata = {"loss": hp.loss, "optimizer": hp.optimizer, "epochs": hp.epochs,
                          "batch_size": hp.batch_size, "seed": hp.seed,
                          "sparsity": pruner.tensor_sparsity(model)}
    if quantize:
        xp, _ = dataset.split("pruning")
        model = quantizer.quantize_model(model, xp[:CALIBRATION_SIZE])
    return model


def _entry_for(index, model_dir: Path, dataset: Dataset, hp: HyperParams, hidden, prune, quantize):
    model_id = index
    path = model_dir / f"model_{index:03d}.json"
    try:
        model = train_member(dataset, hp, hidden, prune=prune, quantize=quantize)
        xp, yp = dataset.split("pruning")
        acc = nncore.accuracy(model, xp, yp)
        model.metadata["hyperparams"] = asdict(hp)
        model.metadata["pruning_accuracy"] = acc
        size = store.save_model(model, path)
    except (Prune2EdgeError, FloatingPointError, ValueError) as exc:
        log.warning("pool member %d failed: %s", index, exc)
        return {"model_id": model_id, "status": "failed", "error": str(exc), "hyperparams": asdict(hp)}
    sparsity = model.metadata["sparsity"]
    sizes = [w.size for w in model.weights]
    return {
        "model_id": model_id,
        "status": "ok",
        "path": path.name,
        "hyperparams": asdict(hp),
        "achieved_sparsity": float(np.dot(sparsity, sizes) / sum(sizes)),
        "tensor_sparsity": sparsity,
        "pruning_accuracy": acc,
        "file_size": size,
        "dense_f32_size": len(store.model_bytes(model, dense_f32=True)),
        "quantized": model.is_quantized,
    }


def generate_pool(dataset: Dataset, pool_size: int, base_seed: int, out_dir, *,
                  hidden=DEFAULT_HIDDEN, workers: int = 1, prune: bool = True,
                  quantize: bool = True, overrides: dict | None = None) -> dict:
    """Train ``pool_size`` members into ``out_dir`` and write ``manifest.json``.

    ``overrides`` pins hyperparameter fields for every member (e.g.
    ``{"final_sparsity": 0.9}``); values are still range-checked.  A callable
    value is called with the member index.
    """
    if pool_size < 1:
        raise ConfigError("pool_size must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hps = []
    for i in range(pool_size):
        hp = sample_hyperparams(np.random.default_rng(member_seed(base_seed, i)))
        for key, value in (overrides or {}).items():
            hp = replace(hp, **{key: value(i) if callable(value) else value})
        hps.append(hp)

    def job(i):
        return _entry_for(i, out_dir, dataset, hps[i], hidden, prune, quantize)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(job, range(pool_size)))
    else:
        entries = [job(i) for i in range(pool_size)]
    entries.sort(key=lambda e: e["model_id"])
    if all(e["status"] == "failed" for e in entries):
        raise PoolError("every pool member failed to train")

    manifest = {
        "pool_id": f"pool-{dataset.fingerprint()[:12]}-{base_seed}",
        "dataset_fingerprint": dataset.fingerprint(),
        "base_seed": base_seed,
        "hidden": list(hidden),
        "entries": entries,
    }
    store.write_json(out_dir / "manifest.json", manifest)
    return manifest


def load_pool(manifest_path):
    """Return ``(manifest, {model_id: Model})`` with every referenced file validated."""
    manifest_path = Path(manifest_path)
    manifest = store.read_json(manifest_path)
    ids = [e["model_id"] for e in manifest["entries"]]
    if len(set(ids)) != len(ids):
        raise PoolError("duplicate model_id in manifest")
    models = {}
    for e in manifest["entries"]:
        if e["status"] != "ok":
            continue
        models[e["model_id"]] = store.load_model(manifest_path.parent / e["path"])
    return manifest, models


def ok_entries(manifest: dict) -> list[dict]:
    return [e for e in manifest["entries"] if e["status"] == "ok"]
