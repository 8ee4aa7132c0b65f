"""Skip-gram word embeddings trained with negative sampling.

The vectors only feed the vocabulary clustering, so the trainer keeps to
the plain reference variant: no frequent-word subsampling, fixed window,
linearly decaying learning rate, one thread.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import faiss
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.special import expit

from pretraining.corpus import NUM_SPECIALS, TokenSequence, Vocab
from pretraining.errors import ConfigError, EmbeddingError, MissingInputError

logger = logging.getLogger(__name__)

# Exponent of the unigram distribution negatives are drawn from
NOISE_POWER = 0.75


class SGNSSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dim: int = Field(64, ge=2)
    window: int = Field(5, ge=1)
    negatives: int = Field(5, ge=1)
    epochs: int = Field(5, ge=0)
    lr: float = Field(0.025, gt=0)
    seed: int = 0
    batch_pairs: int = Field(256, ge=1)


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    trained_epochs: Optional[int] = 0
    loss_history: List[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


def _skipgram_pairs(sequences: List[np.ndarray], window: int) -> Tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for seq in sequences:
        for offset in range(1, min(window, len(seq) - 1) + 1):
            left, right = seq[:-offset], seq[offset:]
            # specials (UNK) hold their place in the window but never pair up
            keep = (left >= NUM_SPECIALS) & (right >= NUM_SPECIALS)
            centers.extend((left[keep], right[keep]))
            contexts.extend((right[keep], left[keep]))
    if not centers:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def _scatter_mean(table: np.ndarray, rows: np.ndarray, grads: np.ndarray, lr: float) -> None:
    # rows hit several times in one batch take the mean of their gradients
    unique, inverse = np.unique(rows, return_inverse=True)
    summed = np.zeros((len(unique), table.shape[1]))
    np.add.at(summed, inverse, grads)
    table[unique] -= lr * summed / np.bincount(inverse)[:, None]


def _sgns_update(w_in, w_out, centers, contexts, negatives, lr) -> float:
    c = w_in[centers]
    o = w_out[contexts]
    n = w_out[negatives]

    pos_score = np.einsum("pd,pd->p", c, o)
    neg_score = np.einsum("pd,pkd->pk", c, n)
    loss = np.logaddexp(0.0, -pos_score) + np.logaddexp(0.0, neg_score).sum(axis=1)

    g_pos = expit(pos_score) - 1.0
    g_neg = expit(neg_score)
    grad_c = g_pos[:, None] * o + np.einsum("pk,pkd->pd", g_neg, n)
    grad_o = g_pos[:, None] * c
    grad_n = g_neg[:, :, None] * c[:, None, :]

    _scatter_mean(w_in, centers, grad_c, lr)
    _scatter_mean(
        w_out,
        np.concatenate([contexts, negatives.ravel()]),
        np.concatenate([grad_o, grad_n.reshape(-1, c.shape[1])]),
        lr,
    )
    return float(loss.mean())


def train_sgns(
    corpus: Iterable[TokenSequence],
    vocab: Vocab,
    dim: int = 64,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
    batch_pairs: int = 256,
) -> EmbeddingTable:
    """Train center/context tables and return the center table.

    Special tokens are never centers, contexts or negatives, so their rows
    keep their initial values. Deterministic for a given seed.
    """
    try:
        settings = SGNSSettings(
            dim=dim, window=window, negatives=negatives, epochs=epochs,
            lr=lr, seed=seed, batch_pairs=batch_pairs,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid SGNS settings: {e}") from e

    rng = np.random.default_rng(settings.seed)
    V = vocab.size
    w_in = (rng.random((V, settings.dim)) - 0.5) / settings.dim
    w_out = np.zeros((V, settings.dim))

    sequences = [np.asarray(seq, dtype=np.int64) for seq in corpus]
    total = sum(int((s >= NUM_SPECIALS).sum()) for s in sequences)
    if total < settings.window:
        raise EmbeddingError(f"corpus of {total} tokens is shorter than the window {settings.window}")

    if settings.epochs == 0:
        return EmbeddingTable(vectors=w_in, trained_epochs=0)

    centers, contexts = _skipgram_pairs(sequences, settings.window)
    counts = np.bincount(np.concatenate(sequences), minlength=V).astype(np.float64)
    counts[:NUM_SPECIALS] = 0.0
    noise_cdf = np.cumsum(counts ** NOISE_POWER)
    noise_cdf /= noise_cdf[-1]

    num_pairs = len(centers)
    if num_pairs == 0:
        logger.warning("No skip-gram pairs in the corpus; returning the initial vectors")
        return EmbeddingTable(vectors=w_in, trained_epochs=settings.epochs)
    steps_per_epoch = -(-num_pairs // settings.batch_pairs)
    total_steps = settings.epochs * steps_per_epoch
    history: List[float] = []
    step = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(num_pairs)
        for start in range(0, num_pairs, settings.batch_pairs):
            idx = order[start:start + settings.batch_pairs]
            alpha = settings.lr * max(1.0 - step / total_steps, 1e-4)
            neg = np.searchsorted(noise_cdf, rng.random((len(idx), settings.negatives)), side="right")
            history.append(_sgns_update(w_in, w_out, centers[idx], contexts[idx], neg, alpha))
            step += 1
        logger.info(
            "SGNS epoch %d/%d: mean loss %.4f",
            epoch + 1, settings.epochs, float(np.mean(history[-steps_per_epoch:])),
        )

    if not np.isfinite(w_in).all():
        raise EmbeddingError("embedding training diverged (non-finite vectors)")
    return EmbeddingTable(vectors=w_in, trained_epochs=settings.epochs, loss_history=history)


def nearest(table: EmbeddingTable, token_id: int, k: int) -> List[Tuple[int, float]]:
    """The k closest ids by Euclidean distance, excluding token_id; ties by id."""
    V = table.size
    if not 0 <= token_id < V:
        raise EmbeddingError(f"token id {token_id} out of range for {V} rows")
    if not 0 < k < V:
        raise EmbeddingError(f"k must be in [1, {V - 1}]")

    vectors = np.ascontiguousarray(table.vectors, dtype=np.float64)
    index = faiss.IndexFlatL2(table.dim)
    index.add(vectors.astype("float32"))
    query = vectors[token_id:token_id + 1].astype("float32")

    probe = min(V, k + 1 + 8)
    while True:
        _, found = index.search(query, probe)
        candidates = np.unique(found[0][found[0] >= 0])
        candidates = candidates[candidates != token_id]
        # float32 search only proposes candidates; the ranking is exact
        dist = np.sqrt(((vectors[candidates] - vectors[token_id]) ** 2).sum(axis=1))
        order = np.lexsort((candidates, dist))
        if probe == V or len(order) > k and dist[order[k]] > dist[order[k - 1]] * (1 + 1e-6) + 1e-9:
            break
        probe = min(V, probe * 2)

    return [(int(candidates[i]), float(dist[i])) for i in order[:k]]


def save_embeddings(table: EmbeddingTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{table.size} {table.dim}\n")
        for row in table.vectors:
            f.write(" ".join(format(float(x), ".17g") for x in row) + "\n")


def load_embeddings(path) -> EmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"embedding file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise EmbeddingError(f"bad embedding header in {path}")
        V, d = int(header[0]), int(header[1])
        vectors = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if vectors.shape != (V, d):
        raise EmbeddingError(f"expected {V}x{d} vectors, found {vectors.shape}")
    return EmbeddingTable(vectors=vectors, trained_epochs=None)
