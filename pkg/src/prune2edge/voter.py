"""Max (plurality) voting over ensemble members.

A ballot is a ``(n_members, n_classes)`` array of votes.  Hard voting turns
each member's output into a one-hot vote for its argmax class; soft voting
(opt-in) sums the probabilities instead.  Ties always go to the lowest class
index.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore, store
from .errors import ConfigError


def to_ballot(votes: Sequence[int], n_classes: int) -> np.ndarray:
    """One-hot ballot from a list of voted class indices."""
    votes = np.asarray(votes, dtype=np.int64)
    if votes.size and (votes.min() < 0 or votes.max() >= n_classes):
        raise ConfigError(f"vote outside [0, {n_classes})")
    return nncore.one_hot(votes, n_classes, dtype=np.int64)


def hard_votes(probabilities) -> np.ndarray:
    p = np.asarray(probabilities)
    return nncore.one_hot(np.argmax(p, axis=-1), p.shape[-1], dtype=np.int64)


def max_vote(ballot) -> int:
    b = np.asarray(ballot)
    if b.ndim != 2 or b.shape[0] == 0:
        raise ConfigError("ballot needs at least one member")
    return int(np.argmax(b.sum(axis=0)))


def hierarchical_vote(node_ballots: Sequence) -> int:
    """Vote inside each node, then vote over the node winners."""
    if len(node_ballots) == 0:
        raise ConfigError("no node ballots")
    winners = [max_vote(b) for b in node_ballots]
    n_classes = np.asarray(node_ballots[0]).shape[1]
    return max_vote(to_ballot(winners, n_classes))


def vote_batch(outputs, soft: bool = False) -> np.ndarray:
    """Per-sample ensemble decisions.

    ``outputs`` is ``(n_members, n_samples, n_classes)``.  Returns one class per
    sample.
    """
    out = np.asarray(outputs)
    if out.ndim != 3 or out.shape[0] == 0:
        raise ConfigError("outputs must be (n_members, n_samples, n_classes) with >= 1 member")
    ballots = out if soft else hard_votes(out)
    return np.argmax(ballots.sum(axis=0), axis=1)


def load_members(models) -> list[nncore.Model]:
    """Accept loaded models or model file paths."""
    loaded = []
    for m in models:
        if isinstance(m, nncore.Model):
            loaded.append(m)
        else:
            path = Path(m)
            if not path.exists():
                raise ConfigError(f"missing model file {path}")
            loaded.append(store.load_model(path))
    return loaded


def evaluate_ensemble(models, features, labels, soft: bool = False):
    """Return ``(accuracy, predicted_classes)`` of the max-vote ensemble."""
    members = load_members(models)
    if not members:
        raise ConfigError("empty ensemble")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("empty evaluation split")
    preds = vote_batch([nncore.forward(m, features) for m in members], soft=soft)
    return float(np.mean(preds == labels)), preds


def hierarchical_predictions(node_models: Sequence[Sequence[nncore.Model]], features) -> np.ndarray:
    """In-process reference for the distributed runtime: node votes, then a master vote."""
    node_preds = [vote_batch([nncore.forward(m, features) for m in models]) for models in node_models]
    n_classes = node_models[0][0].n_classes
    return vote_batch([nncore.one_hot(p, n_classes) for p in node_preds])
