"""History-based statistical replacement generator.

F[i, j] counts discriminator failures minus successes when a token of
cluster i was replaced by a token of cluster j. Each row becomes a
distribution over target clusters by min-max normalisation followed by a
gamma-scaled softmax; the replacement is then drawn uniformly from the
target cluster, never equal to the original token.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from pretraining.cluster import ClusterModel, cluster_of
from pretraining.corpus import NUM_SPECIALS
from pretraining.errors import CountMatrixError, MissingInputError

logger = logging.getLogger(__name__)

# Resamples of the target cluster before falling back to the whole vocab
MAX_CLUSTER_RETRIES = 8


@dataclass(frozen=True)
class OutcomeEvent:
    source_cluster: int
    target_cluster: int
    discriminator_correct: bool


@dataclass
class OutcomeDelta:
    """Sparse (i, j) -> signed count accumulated over one batch."""

    counts: Dict[Tuple[int, int], int] = field(default_factory=dict)
    num_events: int = 0

    @classmethod
    def from_events(cls, events: Iterable[OutcomeEvent]) -> "OutcomeDelta":
        counts: Counter = Counter()
        total = 0
        for event in events:
            key = (int(event.source_cluster), int(event.target_cluster))
            counts[key] += -1 if event.discriminator_correct else 1
            total += 1
        return cls(counts=dict(counts), num_events=total)

    @classmethod
    def from_arrays(cls, source: np.ndarray, target: np.ndarray, correct: np.ndarray) -> "OutcomeDelta":
        source = np.asarray(source, dtype=np.int64).ravel()
        target = np.asarray(target, dtype=np.int64).ravel()
        signs = np.where(np.asarray(correct, dtype=bool).ravel(), -1, 1)
        if len(source) == 0:
            return cls()
        pairs, inverse = np.unique(np.stack([source, target], axis=1), axis=0, return_inverse=True)
        sums = np.bincount(inverse.ravel(), weights=signs, minlength=len(pairs)).astype(np.int64)
        counts = {(int(i), int(j)): int(s) for (i, j), s in zip(pairs, sums)}
        return cls(counts=counts, num_events=len(source))

    def merge(self, other: "OutcomeDelta") -> "OutcomeDelta":
        counts = dict(self.counts)
        for key, value in other.counts.items():
            counts[key] = counts.get(key, 0) + value
        return OutcomeDelta(counts=counts, num_events=self.num_events + other.num_events)


@dataclass
class CountMatrix:
    F: np.ndarray
    gamma: float = 2.0

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=np.int64)
        if self.F.ndim != 2 or self.F.shape[0] != self.F.shape[1]:
            raise CountMatrixError(f"count matrix must be square, got {self.F.shape}")
        if not self.gamma > 0:
            raise CountMatrixError("gamma must be positive")

    @classmethod
    def zeros(cls, n: int, gamma: float = 2.0) -> "CountMatrix":
        return cls(F=np.zeros((n, n), dtype=np.int64), gamma=gamma)

    @property
    def n(self) -> int:
        return self.F.shape[0]


def _normalised_softmax(rows: np.ndarray, gamma: float) -> np.ndarray:
    rows = np.atleast_2d(rows).astype(np.float64)
    lo = rows.min(axis=1, keepdims=True)
    hi = rows.max(axis=1, keepdims=True)
    span = hi - lo
    flat = span[:, 0] == 0
    scaled = np.where(span > 0, (rows - lo) / np.where(span > 0, span, 1.0), 0.0)
    z = gamma * scaled
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    # a row without spread carries no preference
    p[flat] = 1.0 / rows.shape[1]
    return p


def row_distribution(cm: CountMatrix, i: int) -> np.ndarray:
    """P(C_j | C_i) for every target cluster j."""
    if not 0 <= i < cm.n:
        raise CountMatrixError(f"cluster index {i} out of range for n={cm.n}")
    return _normalised_softmax(cm.F[i], cm.gamma)[0]


def distribution_matrix(cm: CountMatrix) -> np.ndarray:
    """All rows of row_distribution at once."""
    return _normalised_softmax(cm.F, cm.gamma)


class ReplacementSampler:
    """Frozen snapshot of (F, clusters) ready for vectorised sampling."""

    def __init__(self, cm: CountMatrix, clusters: ClusterModel):
        if cm.n != clusters.n:
            raise CountMatrixError(f"count matrix has n={cm.n} but the cluster model has n={clusters.n}")
        self.n = cm.n
        self.assignment = clusters.assignment
        self.vocab_size = clusters.vocab_size
        self.num_candidates = self.vocab_size - NUM_SPECIALS
        if self.num_candidates < 2:
            raise CountMatrixError("need at least two non-special tokens to replace anything")
        self.sizes = clusters.sizes
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.flat_members = np.concatenate(clusters.members)
        # position of every token inside its own (sorted) member list
        self.position = np.zeros(self.vocab_size, dtype=np.int64)
        for members in clusters.members:
            self.position[members] = np.arange(len(members))
        self.cdf = np.cumsum(distribution_matrix(cm), axis=1)

    def sample(self, alphas: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw one replacement per alpha. Returns (betas, source clusters, target clusters)."""
        alphas = np.asarray(alphas, dtype=np.int64)
        if alphas.size and (alphas < NUM_SPECIALS).any():
            raise CountMatrixError("special tokens are never replaced")
        source = self.assignment[alphas]
        betas = np.full(alphas.shape, -1, dtype=np.int64)
        pending = np.arange(alphas.size)

        for _ in range(MAX_CLUSTER_RETRIES):
            if pending.size == 0:
                break
            src = source[pending]
            u = rng.random(pending.size)
            target = (self.cdf[src] <= u[:, None]).sum(axis=1)
            target = np.minimum(target, self.n - 1)
            own = target == src
            blocked = own & (self.sizes[target] == 1)
            ok = ~blocked
            if ok.any():
                idx, tgt, own_ok = pending[ok], target[ok], own[ok]
                r = rng.integers(0, self.sizes[tgt] - own_ok.astype(np.int64))
                r = r + (own_ok & (r >= self.position[alphas[idx]]))
                betas[idx] = self.flat_members[self.offsets[tgt] + r]
            pending = pending[blocked]

        if pending.size:
            logger.warning("Falling back to uniform replacement for %d singleton-cluster tokens", pending.size)
            r = NUM_SPECIALS + rng.integers(0, self.num_candidates - 1, size=pending.size)
            betas[pending] = r + (r >= alphas[pending])

        return betas, source, self.assignment[betas]


def sample_replacement(cm: CountMatrix, clusters: ClusterModel, alpha: int, rng: np.random.Generator) -> int:
    """Draw beta != alpha for one token; see ReplacementSampler for the batch form."""
    if alpha < NUM_SPECIALS:
        raise CountMatrixError("special tokens are never replaced")
    betas, _, _ = ReplacementSampler(cm, clusters).sample(np.asarray([alpha]), rng)
    return int(betas[0])


def replacement_probability(cm: CountMatrix, clusters: ClusterModel, alpha: int, beta: int) -> float:
    """Exact probability that sample_replacement turns alpha into beta."""
    if beta == alpha:
        raise CountMatrixError("beta must differ from alpha")
    i = cluster_of(clusters, alpha)
    j = cluster_of(clusters, beta)
    p = row_distribution(cm, i)
    sizes = clusters.sizes

    direct = p[j] / (sizes[j] - (1 if i == j else 0))
    blocked = p[i] if sizes[i] == 1 else 0.0
    if blocked == 0.0:
        return float(direct)
    # retries of a singleton own cluster, then the uniform fallback;
    # summed term by term so blocked == 1.0 stays finite
    retry = float(np.sum(blocked ** np.arange(MAX_CLUSTER_RETRIES)))
    fallback = blocked ** MAX_CLUSTER_RETRIES / (clusters.vocab_size - NUM_SPECIALS - 1)
    return float(direct * retry + fallback)


def update_counts(cm: CountMatrix, delta: OutcomeDelta) -> CountMatrix:
    """Return a new matrix with the delta added (correct -1, failure +1 per event)."""
    F = cm.F.copy()
    for (i, j), value in delta.counts.items():
        if not (0 <= i < cm.n and 0 <= j < cm.n):
            raise CountMatrixError(f"delta index ({i}, {j}) out of range for n={cm.n}")
        F[i, j] += value
    return CountMatrix(F=F, gamma=cm.gamma)


def save_count_matrix(cm: CountMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{cm.n} {format(cm.gamma, '.17g')}\n")
        for row in cm.F:
            f.write(" ".join(str(int(x)) for x in row) + "\n")


def load_count_matrix(path) -> CountMatrix:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"count matrix file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        n, gamma = int(header[0]), float(header[1])
        F = np.loadtxt(f, dtype=np.int64, ndmin=2)
    if F.shape != (n, n):
        raise CountMatrixError(f"expected a {n}x{n} matrix, found {F.shape}")
    return CountMatrix(F=F, gamma=gamma)


def initial_state(clusters: ClusterModel, gamma: float, F: Optional[np.ndarray] = None) -> CountMatrix:
    """Zero matrix sized for the cluster model (or a restored one, checked)."""
    if F is None:
        return CountMatrix.zeros(clusters.n, gamma)
    cm = CountMatrix(F=F, gamma=gamma)
    if cm.n != clusters.n:
        raise CountMatrixError(f"restored count matrix has n={cm.n}, clusters have n={clusters.n}")
    return cm
