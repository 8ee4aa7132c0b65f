"""K-means partition of the vocabulary over embedding vectors."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from pretraining.corpus import NUM_SPECIALS, Vocab
from pretraining.embed import EmbeddingTable
from pretraining.errors import ClusterError, ConfigError, MissingInputError

logger = logging.getLogger(__name__)

# Sentinel cluster index of special tokens
UNCLUSTERED = -1

# Points per chunk when computing point-to-centroid distances
_CHUNK = 1024


@dataclass
class ClusterModel:
    n: int
    assignment: np.ndarray
    centroids: np.ndarray
    sse: float
    sse_history: List[float] = field(default_factory=list)
    members: List[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        ids = np.arange(len(self.assignment))
        self.members = [ids[self.assignment == j] for j in range(self.n)]

    @property
    def sizes(self) -> np.ndarray:
        return np.asarray([len(m) for m in self.members], dtype=np.int64)

    @property
    def vocab_size(self) -> int:
        return len(self.assignment)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty((len(points), len(centroids)))
    for start in range(0, len(points), _CHUNK):
        diff = points[start:start + _CHUNK, None, :] - centroids[None, :, :]
        out[start:start + _CHUNK] = (diff ** 2).sum(axis=2)
    return out


def _kmeans_plus_plus(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(len(points)))]
    closest = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, n):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(len(points), p=closest / total))
        else:
            # every point coincides with a chosen center
            remaining = np.setdiff1d(np.arange(len(points)), chosen)
            pick = int(rng.choice(remaining))
        chosen.append(pick)
        closest = np.minimum(closest, ((points - points[pick]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _repair_empty(points, labels, centroids, n) -> None:
    while True:
        sizes = np.bincount(labels, minlength=n)
        empty = np.flatnonzero(sizes == 0)
        if len(empty) == 0:
            return
        largest = int(np.argmax(sizes))
        in_largest = np.flatnonzero(labels == largest)
        far = in_largest[np.argmax(((points[in_largest] - centroids[largest]) ** 2).sum(axis=1))]
        j = int(empty[0])
        logger.warning("Cluster %d emptied; reseeding it from cluster %d", j, largest)
        labels[far] = j
        centroids[j] = points[far]


def kmeans(table: EmbeddingTable, vocab: Vocab, n: int, max_iter: int = 100, seed: int = 0) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding over the non-special rows.

    Point-to-centroid ties go to the lower cluster index.
    """
    if max_iter < 1:
        raise ConfigError("max_iter must be at least 1")
    if table.size != vocab.size:
        raise ClusterError(f"embedding table has {table.size} rows for a vocab of {vocab.size}")
    points = np.asarray(table.vectors[NUM_SPECIALS:], dtype=np.float64)
    if n < 1 or n > len(points):
        raise ClusterError(f"cannot form {n} clusters from {len(points)} tokens")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points, n, rng)
    labels = None
    history: List[float] = []

    for it in range(max_iter):
        new_labels = np.argmin(_sq_distances(points, centroids), axis=1)
        _repair_empty(points, new_labels, centroids, n)
        for j in range(n):
            centroids[j] = points[new_labels == j].mean(axis=0)
        sse = float(((points - centroids[new_labels]) ** 2).sum())
        history.append(sse)
        logger.debug("k-means iteration %d: sse %.6f", it + 1, sse)
        if labels is not None and np.array_equal(labels, new_labels):
            labels = new_labels
            break
        labels = new_labels

    assignment = np.full(vocab.size, UNCLUSTERED, dtype=np.int64)
    assignment[NUM_SPECIALS:] = labels
    logger.info("k-means: %d clusters, %d iterations, sse %.4f", n, len(history), history[-1])
    return ClusterModel(n=n, assignment=assignment, centroids=centroids, sse=history[-1], sse_history=history)


def cluster_of(model: ClusterModel, token_id: int) -> int:
    if not 0 <= token_id < model.vocab_size:
        raise ClusterError(f"token id {token_id} out of range")
    cluster = int(model.assignment[token_id])
    if cluster == UNCLUSTERED:
        raise ClusterError("specials are unclustered")
    return cluster


def save_clusters(model: ClusterModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{model.n} {model.vocab_size}\n")
        for token_id, cluster in enumerate(model.assignment):
            f.write(f"{token_id} {int(cluster)}\n")
        for row in model.centroids:
            f.write(" ".join(format(float(x), ".17g") for x in row) + "\n")


def load_clusters(path) -> ClusterModel:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"cluster file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.split() for line in f if line.strip()]
    try:
        n, V = int(lines[0][0]), int(lines[0][1])
        assignment = np.asarray([int(parts[1]) for parts in lines[1:V + 1]], dtype=np.int64)
        centroids = np.asarray([[float(x) for x in parts] for parts in lines[V + 1:V + 1 + n]])
    except (IndexError, ValueError) as e:
        raise ClusterError(f"malformed cluster file {path}: {e}") from e
    if len(assignment) != V or centroids.shape[0] != n:
        raise ClusterError(f"cluster file {path} is truncated")

    model = ClusterModel(n=n, assignment=assignment, centroids=centroids, sse=float("nan"))
    if (model.sizes == 0).any():
        raise ClusterError(f"cluster file {path} has empty clusters")
    return model
