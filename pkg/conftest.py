"""Shared fixtures: a small synthetic corpus, its vocab, a five-cluster
partition and a tiny model shape."""

import numpy as np
import pytest

from pretraining.cluster import UNCLUSTERED, ClusterModel
from pretraining.corpus import (
    CLS_ID,
    NUM_SPECIALS,
    PAD_ID,
    SEP_ID,
    Batch,
    Vocab,
    build_vocab,
    encode,
    generate_corpus,
)
from pretraining.model import HeadType, ModelConfig


def make_batch(rows, max_len=None):
    """Batch from lists of payload ids, wrapped in CLS ... SEP and PAD-filled."""
    max_len = max_len or max(len(r) for r in rows) + 2
    ids = np.full((len(rows), max_len), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(rows), dtype=np.int64)
    for r, tokens in enumerate(rows):
        ids[r, 0] = CLS_ID
        ids[r, 1:len(tokens) + 1] = tokens
        ids[r, len(tokens) + 1] = SEP_ID
        lengths[r] = len(tokens) + 2
    attention = np.arange(max_len)[None, :] < lengths[:, None]
    return Batch(ids=ids, attention_mask=attention, lengths=lengths)


def make_clusters(sizes, vocab_size=None):
    """Cluster model assigning consecutive non-special ids to clusters of the given sizes."""
    assignment = [UNCLUSTERED] * NUM_SPECIALS
    for j, size in enumerate(sizes):
        assignment += [j] * size
    if vocab_size is not None:
        assert len(assignment) == vocab_size
    return ClusterModel(n=len(sizes), assignment=np.asarray(assignment), centroids=np.zeros((len(sizes), 2)), sse=0.0)


@pytest.fixture(scope="session")
def corpus_lines():
    return generate_corpus(num_docs=300, num_words=60, num_topics=3, seed=0, min_doc_len=8, max_doc_len=20)


@pytest.fixture(scope="session")
def vocab(corpus_lines):
    return build_vocab(corpus_lines, max_size=1000)


@pytest.fixture(scope="session")
def encoded(corpus_lines, vocab):
    return [encode(vocab, line) for line in corpus_lines]


@pytest.fixture
def batch(encoded):
    return make_batch([seq[:14] for seq in encoded[:16]], max_len=16)


@pytest.fixture
def word_vocab():
    """50 non-special tokens."""
    return Vocab.from_tokens([f"w{i}" for i in range(50)])


@pytest.fixture
def five_clusters():
    """Five clusters over 50 tokens, the first a singleton."""
    return make_clusters([1, 7, 12, 14, 16], vocab_size=55)


@pytest.fixture
def vocab_clusters(vocab):
    assignment = np.full(vocab.size, UNCLUSTERED, dtype=np.int64)
    assignment[NUM_SPECIALS:] = np.arange(vocab.num_candidates) % 3
    return ClusterModel(n=3, assignment=assignment, centroids=np.zeros((3, 2)), sse=0.0)


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(layers=2, hidden=8, heads=2, intermediate=16, max_len=16, vocab_size=vocab.size,
                       head_type=HeadType.BINARY)
