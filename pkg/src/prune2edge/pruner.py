"""Gradual magnitude pruning with a cubic sparsity schedule.

At each pruning event every weight matrix is re-sorted by magnitude and the
smallest entries are zeroed through a binary mask.  Between events the masked
weights get neither gradient nor optimizer updates.  Biases are never pruned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nncore
from .errors import ConfigError, ScheduleError
from .nncore import LayerSpec, Model, OptimizerState


@dataclass(frozen=True)
class PruningSchedule:
    initial_sparsity: float
    final_sparsity: float
    start_step: int = 0
    n_steps: int = 1
    frequency: int = 100

    def __post_init__(self):
        if not 0 <= self.initial_sparsity < self.final_sparsity <= 1:
            raise ConfigError(
                f"need 0 <= initial < final <= 1, got {self.initial_sparsity}, {self.final_sparsity}"
            )
        if self.start_step < 0 or self.n_steps < 1 or self.frequency < 1:
            raise ConfigError("start_step >= 0, n_steps >= 1 and frequency >= 1 required")

    @property
    def end_step(self) -> int:
        return self.start_step + self.n_steps * self.frequency

    def is_event(self, t: int) -> bool:
        offset = t - self.start_step
        return 0 <= offset <= self.n_steps * self.frequency and offset % self.frequency == 0

    def events(self) -> list[int]:
        return [self.start_step + i * self.frequency for i in range(self.n_steps + 1)]


def sparsity_at(schedule: PruningSchedule, t: int) -> float:
    """Target sparsity at pruning event ``t``.

    ``s_f + (s_i - s_f) * (1 - (t - t0) / (n * dt)) ** 3``; only defined on the
    event grid ``t0, t0 + dt, ..., t0 + n * dt``.
    """
    if not schedule.is_event(t):
        raise ScheduleError(f"step {t} is not a pruning event of {schedule}")
    progress = (t - schedule.start_step) / (schedule.n_steps * schedule.frequency)
    s_i, s_f = schedule.initial_sparsity, schedule.final_sparsity
    return s_f + (s_i - s_f) * (1.0 - progress) ** 3


def n_masked(size: int, sparsity: float) -> int:
    return math.floor(sparsity * size)


def build_mask(weights: np.ndarray, target_sparsity: float) -> np.ndarray:
    """Zero the ``floor(s * size)`` smallest-magnitude entries.

    Ties go to the lowest flat index, so equal magnitudes are masked in
    row-major order.
    """
    if not 0 <= target_sparsity <= 1:
        raise ConfigError(f"target sparsity {target_sparsity} outside [0, 1]")
    w = np.asarray(weights)
    flat = np.abs(w).ravel()
    mask = np.ones(flat.size, dtype=np.uint8)
    mask[np.argsort(flat, kind="stable")[:n_masked(flat.size, target_sparsity)]] = 0
    return mask.reshape(w.shape)


def apply_masks(model: Model) -> None:
    # np.where keeps masked entries at +0.0 (w * 0 would leave -0.0 for negatives)
    for k, (w, m) in enumerate(zip(model.weights, model.masks)):
        model.weights[k] = np.where(m == 1, w, w.dtype.type(0))


def prune_step(model: Model, sparsity: float) -> None:
    """Recompute every layer's mask at ``sparsity`` and zero the masked weights."""
    model.masks = [build_mask(w, sparsity) for w in model.weights]
    apply_masks(model)


def tensor_sparsity(model: Model) -> list[float]:
    if model.masks is None:
        return [float(np.mean(w == 0)) for w in model.weights]
    return [float(np.mean(m == 0)) for m in model.masks]


def pruned_train(features, labels, layers: list[LayerSpec], *, loss_kind: str,
                 optimizer: OptimizerState, schedule: PruningSchedule, epochs: int,
                 batch_size: int, seed: int, dtype=np.float32) -> Model:
    """Train an MLP from scratch while pruning it on ``schedule``.

    The step counter counts optimizer updates from 0.  The event at step ``t``
    fires after ``t`` updates, so the last event may coincide with the end of
    training (``t == total_steps``).
    """
    x = np.asarray(features, dtype=dtype)
    labels = np.asarray(labels)
    total = epochs * nncore.steps_per_epoch(len(x), batch_size)
    if schedule.end_step > total:
        raise ConfigError(
            f"schedule ends at step {schedule.end_step} but training only has {total} steps"
        )
    init_seed, shuffle_seed = np.random.SeedSequence(seed).generate_state(2)
    model = nncore.init_model(layers, int(init_seed), dtype=dtype)
    y = nncore.one_hot(labels, model.n_classes, dtype=dtype)
    rng = np.random.default_rng(int(shuffle_seed))
    params = [*model.weights, *model.biases]
    n_layers = len(layers)

    t = 0
    for _ in range(epochs):
        for idx in nncore.iterate_batches(len(x), batch_size, rng):
            if schedule.is_event(t):
                prune_step(model, sparsity_at(schedule, t))
                params[:n_layers] = model.weights
            _, gw, gb = nncore.backward(model, x[idx], y[idx], loss_kind)
            if model.masks is not None:
                gw = [g * m for g, m in zip(gw, model.masks)]
            nncore.optimizer_step(optimizer, params, [*gw, *gb])
            if model.masks is not None:
                # adam momentum would otherwise leak into frozen positions
                apply_masks(model)
                params[:n_layers] = model.weights
            t += 1
    if schedule.is_event(t):
        prune_step(model, sparsity_at(schedule, t))

    model.metadata = {
        "loss": loss_kind,
        "optimizer": optimizer.kind,
        "learning_rate": optimizer.learning_rate,
        "epochs": epochs,
        "batch_size": batch_size,
        "seed": seed,
        "schedule": {
            "initial_sparsity": schedule.initial_sparsity,
            "final_sparsity": schedule.final_sparsity,
            "start_step": schedule.start_step,
            "n_steps": schedule.n_steps,
            "frequency": schedule.frequency,
        },
        "total_steps": total,
        "sparsity": tensor_sparsity(model),
    }
    model.validate()
    return model
