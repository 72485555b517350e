"""Clustering-based ensemble pruning.

Each pool member is described by a feature vector over the pruning set: for
every sample, find the single most confident (model, class) pair in the pool's
output matrix and record every model's probability for that class.  Members
are then grouped with k-means and representatives are picked per cluster,
either best-cluster-first (``accuracy-first``) or one per cluster
(``diversity-first``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nncore
from .errors import ConfigError, ShapeError

STRATEGIES = ("accuracy-first", "diversity-first")


def predict_pool(models: Sequence[nncore.Model], samples) -> np.ndarray:
    """Pool outputs as a ``(n_samples, n_models, n_classes)`` array.

    ``out[j]`` is the per-sample matrix with one row per model, in the order
    given (manifest model_id order by convention).
    """
    if not models:
        raise ConfigError("empty pool")
    n_classes = {m.n_classes for m in models}
    if len(n_classes) != 1:
        raise ShapeError(f"pool models disagree on class count: {sorted(n_classes)}")
    return np.stack([nncore.forward(m, samples) for m in models], axis=1).astype(np.float64)


def build_cluster_matrix(matrices) -> np.ndarray:
    """``(n_models, n_samples)`` clustering matrix, one row of features per model.

    Column ``j`` holds every model's probability for the class picked by the
    most confident model on sample ``j``.  Ties go to the lowest model index,
    then the lowest class index (first hit in row-major order).
    """
    a = np.asarray(matrices, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] == 0:
        raise ShapeError(f"expected (n_samples, n_models, n_classes), got {a.shape}")
    n_samples, n_models, n_classes = a.shape
    flat_best = np.argmax(a.reshape(n_samples, -1), axis=1)
    best_class = flat_best % n_classes
    return a[np.arange(n_samples), :, best_class].T.copy()


@dataclass
class ClusterAssignment:
    k: int
    model_ids: list[int]
    labels: np.ndarray  # cluster id per model, aligned with model_ids
    centroids: np.ndarray
    accuracies: dict[int, float] = field(default_factory=dict)
    cluster_accuracy: dict[int, float] = field(default_factory=dict)
    members: dict[int, list[int]] = field(default_factory=dict)  # ranked best first
    sse_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def assignment(self) -> dict[int, int]:
        return {mid: int(c) for mid, c in zip(self.model_ids, self.labels)}

    def cluster_ranking(self) -> list[int]:
        """Cluster ids, best mean accuracy first (lowest id on ties)."""
        return sorted(self.members, key=lambda c: (-self.cluster_accuracy[c], c))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignment": {str(m): c for m, c in self.assignment.items()},
            "centroids": self.centroids.tolist(),
            "cluster_accuracy": {str(c): a for c, a in self.cluster_accuracy.items()},
            "members": {str(c): ids for c, ids in self.members.items()},
            "accuracies": {str(m): a for m, a in self.accuracies.items()},
            "sse_history": self.sse_history,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterAssignment":
        assignment = {int(m): int(c) for m, c in doc["assignment"].items()}
        ids = sorted(assignment)
        return cls(
            k=int(doc["k"]),
            model_ids=ids,
            labels=np.array([assignment[m] for m in ids]),
            centroids=np.asarray(doc["centroids"], dtype=np.float64),
            accuracies={int(m): float(a) for m, a in doc["accuracies"].items()},
            cluster_accuracy={int(c): float(a) for c, a in doc["cluster_accuracy"].items()},
            members={int(c): [int(m) for m in ids_] for c, ids_ in doc["members"].items()},
            sse_history=[float(s) for s in doc.get("sse_history", [])],
            n_iter=int(doc.get("n_iter", 0)),
        )


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centre; take the next unused index
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _repair_empty(points, labels, centroids, k):
    """Give every empty cluster the point farthest from its current centroid."""
    for c in range(k):
        if np.any(labels == c):
            continue
        d2 = np.sum((points - centroids[labels]) ** 2, axis=1)
        counts = np.bincount(labels, minlength=k)
        d2[counts[labels] <= 1] = -1  # never empty another cluster
        far = int(np.argmax(d2))
        labels[far] = c
        centroids[c] = points[far]
    return labels


def _sse(points, labels, centroids) -> float:
    return float(np.sum((points - centroids[labels]) ** 2))


def kmeans(points, k: int, seed: int, max_iters: int = 300, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(labels, centroids, sse_history, n_iter)``.  ``sse_history``
    records the objective after every assignment step.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("points must be a 2-D array")
    if not 1 <= k <= len(x):
        raise ConfigError(f"k must be in [1, {len(x)}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    history = []
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    labels = _repair_empty(x, labels, centroids, k)
    history.append(_sse(x, labels, centroids))
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new = np.stack([x[labels == c].mean(axis=0) for c in range(k)])
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        labels = _repair_empty(x, labels, centroids, k)
        history.append(_sse(x, labels, centroids))
        if shift < tol:
            break
    centroids = np.stack([x[labels == c].mean(axis=0) for c in range(k)])
    return labels, centroids, history, n_iter


def cluster_pool(cluster_matrix, k: int, seed: int, accuracies: Sequence[float],
                 model_ids: Sequence[int] | None = None, max_iters=300, tol=1e-6) -> ClusterAssignment:
    """k-means over the rows of ``cluster_matrix`` plus accuracy rankings."""
    c = np.asarray(cluster_matrix, dtype=np.float64)
    model_ids = list(range(len(c))) if model_ids is None else [int(m) for m in model_ids]
    if len(model_ids) != len(c) or len(accuracies) != len(c):
        raise ShapeError("need one model id and one accuracy per row")
    labels, centroids, history, n_iter = kmeans(c, k, seed, max_iters, tol)
    acc = {mid: float(a) for mid, a in zip(model_ids, accuracies)}
    members, cluster_acc = {}, {}
    for cid in range(k):
        ids = [mid for mid, lab in zip(model_ids, labels) if lab == cid]
        members[cid] = sorted(ids, key=lambda m: (-acc[m], m))
        cluster_acc[cid] = float(np.mean([acc[m] for m in ids]))
    return ClusterAssignment(k, model_ids, labels, centroids, acc, cluster_acc, members,
                             history, n_iter)


def select_accuracy_first(assignment: ClusterAssignment, ensemble_size: int) -> list[int]:
    """Top members of the best cluster, spilling into the next-best when it runs out."""
    if not 1 <= ensemble_size <= len(assignment.model_ids):
        raise ConfigError(f"ensemble_size must be in [1, {len(assignment.model_ids)}]")
    ranked = [m for c in assignment.cluster_ranking() for m in assignment.members[c]]
    return ranked[:ensemble_size]


def select_diversity_first(assignment: ClusterAssignment) -> list[int]:
    """The most accurate member of every cluster, best cluster first."""
    return [assignment.members[c][0] for c in assignment.cluster_ranking() if assignment.members[c]]


def select(assignment: ClusterAssignment, strategy: str, ensemble_size: int | None = None) -> list[int]:
    if strategy == "accuracy-first":
        return select_accuracy_first(assignment, ensemble_size or 1)
    if strategy == "diversity-first":
        return select_diversity_first(assignment)
    raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
