"""Text ingestion, vocabulary construction, encoding and batch packing."""

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from pretraining.errors import ConfigError, CorpusError, MissingInputError

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

# Specials occupy the lowest ids, in this order, in every vocab.
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))
NUM_SPECIALS = len(SPECIAL_TOKENS)

# A token sequence is a 1-d int64 array of ids with no padding.
TokenSequence = np.ndarray


def tokenize(text: str) -> List[str]:
    """Whitespace split of the lowercased text."""
    return text.lower().split()


@dataclass(frozen=True, eq=False)
class Vocab:
    """Immutable token <-> id mapping with frequencies.

    Ids are dense; the special tokens take ids 0..NUM_SPECIALS-1.
    """

    tokens: Tuple[str, ...]
    freq: np.ndarray
    min_freq: int = 1
    max_size: int = 0
    corpus_hash: str = ""
    id_of: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIALS]) != SPECIAL_TOKENS:
            raise CorpusError("vocab must start with the special tokens")
        if len(self.freq) != len(self.tokens):
            raise CorpusError("frequency table does not match the token list")
        object.__setattr__(self, "id_of", {token: i for i, token in enumerate(self.tokens)})

    @classmethod
    def from_tokens(cls, words: Sequence[str], freq: Optional[Sequence[int]] = None) -> "Vocab":
        """Build a vocab from an explicit word list (specials are prepended)."""
        counts = [0] * NUM_SPECIALS + (list(freq) if freq is not None else [1] * len(words))
        return cls(tokens=SPECIAL_TOKENS + tuple(words), freq=np.asarray(counts, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> Dict[str, int]:
        return {token: i for i, token in enumerate(SPECIAL_TOKENS)}

    @property
    def mask_id(self) -> int:
        return MASK_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @property
    def num_candidates(self) -> int:
        """Number of non-special tokens."""
        return self.size - NUM_SPECIALS

    @property
    def non_special_ids(self) -> np.ndarray:
        return np.arange(NUM_SPECIALS, self.size, dtype=np.int64)

    @staticmethod
    def is_special(token_id: int) -> bool:
        return token_id < NUM_SPECIALS


@dataclass
class Batch:
    """Left-aligned, PAD-filled block of rows."""

    ids: np.ndarray
    attention_mask: np.ndarray
    lengths: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.ids.shape


def corpus_hash(lines: Iterable[str]) -> str:
    hasher = hashlib.sha256()
    for line in lines:
        hasher.update(line.rstrip("\n").encode("utf-8"))
        hasher.update(b"\n")
    return hasher.hexdigest()


def build_vocab(text_stream: Iterable[str], max_size: int, min_freq: int = 1) -> Vocab:
    """Count words and keep the most frequent ones.

    The rarest words are dropped first; ties are broken lexicographically.
    """
    if max_size <= NUM_SPECIALS:
        raise ConfigError(f"max_size must exceed the {NUM_SPECIALS} special tokens")
    if min_freq < 1:
        raise ConfigError("min_freq must be at least 1")

    counts: Counter = Counter()
    hasher = hashlib.sha256()
    for line in text_stream:
        hasher.update(line.rstrip("\n").encode("utf-8"))
        hasher.update(b"\n")
        counts.update(tokenize(line))

    if not counts:
        raise CorpusError("empty corpus")

    candidates = [w for w, c in counts.items() if c >= min_freq and w not in SPECIAL_TOKENS]
    candidates.sort(key=lambda w: (-counts[w], w))
    kept = candidates[: max_size - NUM_SPECIALS]

    vocab = Vocab(
        tokens=SPECIAL_TOKENS + tuple(kept),
        freq=np.asarray([0] * NUM_SPECIALS + [counts[w] for w in kept], dtype=np.int64),
        min_freq=min_freq,
        max_size=max_size,
        corpus_hash=hasher.hexdigest(),
    )
    logger.info("Built vocab with %d entries (%d distinct words seen)", vocab.size, len(counts))
    return vocab


def encode(vocab: Vocab, text: str) -> TokenSequence:
    """Map words to ids; out-of-vocabulary words become UNK."""
    return np.asarray([vocab.id_of.get(w, UNK_ID) for w in tokenize(text)], dtype=np.int64)


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


def pack_batches(
    seqs: Iterable[TokenSequence], max_len: int, batch_size: int, rng_seed: int
) -> Iterator[Batch]:
    """Pack sequences into CLS ... SEP rows and group them into batches.

    Sequences longer than max_len - 2 are split into several rows. Row order
    is shuffled with rng_seed; the last batch may be smaller.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    if max_len < 3:
        raise ConfigError("max_len must leave room for CLS, one token and SEP")
    rows = _split_rows(seqs, max_len - 2)
    return _iter_batches(rows, max_len, batch_size, rng_seed)


def _split_rows(seqs: Iterable[TokenSequence], payload: int) -> List[np.ndarray]:
    rows = []
    for seq in seqs:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size and (seq == PAD_ID).any():
            raise CorpusError("token sequences must not contain PAD")
        for start in range(0, len(seq), payload):
            rows.append(seq[start:start + payload])
    return rows


def _iter_batches(rows: List[np.ndarray], max_len: int, batch_size: int, rng_seed: int) -> Iterator[Batch]:
    order = np.random.default_rng(rng_seed).permutation(len(rows))
    positions = np.arange(max_len)
    for start in range(0, len(order), batch_size):
        chunk = [rows[i] for i in order[start:start + batch_size]]
        ids = np.full((len(chunk), max_len), PAD_ID, dtype=np.int64)
        lengths = np.zeros(len(chunk), dtype=np.int64)
        for r, tokens in enumerate(chunk):
            n = len(tokens)
            ids[r, 0] = CLS_ID
            ids[r, 1:n + 1] = tokens
            ids[r, n + 1] = SEP_ID
            lengths[r] = n + 2
        yield Batch(ids=ids, attention_mask=positions[None, :] < lengths[:, None], lengths=lengths)


def iter_corpus(path) -> Iterator[str]:
    """Yield non-empty documents (one per line) of a UTF-8 corpus file."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"corpus file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield line


def save_vocab(vocab: Vocab, path) -> None:
    """Write the token list plus the .meta and .counts siblings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(vocab.tokens) + "\n")
    with open(f"{path}.meta", "w", encoding="utf-8") as f:
        f.write(f"min_freq={vocab.min_freq}\n")
        f.write(f"max_size={vocab.max_size}\n")
        f.write(f"corpus_hash={vocab.corpus_hash}\n")
    with open(f"{path}.counts", "w", encoding="utf-8") as f:
        f.write("\n".join(str(int(c)) for c in vocab.freq) + "\n")


def load_vocab(path) -> Vocab:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"vocab file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        tokens = tuple(line.rstrip("\n") for line in f if line.rstrip("\n"))

    meta: Dict[str, str] = {}
    meta_path = Path(f"{path}.meta")
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as f:
            for line in f:
                if "=" in line:
                    key, value = line.rstrip("\n").split("=", 1)
                    meta[key] = value

    counts_path = Path(f"{path}.counts")
    if counts_path.exists():
        freq = np.loadtxt(counts_path, dtype=np.int64, ndmin=1)
    else:
        freq = np.zeros(len(tokens), dtype=np.int64)

    return Vocab(
        tokens=tokens,
        freq=freq,
        min_freq=int(meta.get("min_freq", 1)),
        max_size=int(meta.get("max_size", len(tokens))),
        corpus_hash=meta.get("corpus_hash", ""),
    )


_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def _pseudo_word(i: int) -> str:
    n = len(_SYLLABLES)
    word = _SYLLABLES[i % n] + _SYLLABLES[(i // n) % n]
    if i >= n * n:
        word += _SYLLABLES[(i // (n * n)) % n]
    return word


def generate_corpus(
    num_docs: int = 5000,
    num_words: int = 600,
    num_topics: int = 10,
    seed: int = 0,
    min_doc_len: int = 20,
    max_doc_len: int = 60,
    successors: int = 4,
    zipf_exponent: float = 1.1,
) -> List[str]:
    """Synthetic corpus: topic blocks of Zipf-weighted words, 2nd-order Markov text.

    Every document picks one topic. Each (previous, current) word pair of a
    topic has a few fixed successors drawn with Zipf weights, chosen with
    decreasing probability.
    """
    if num_topics < 1 or num_words < num_topics * 2:
        raise ConfigError("need at least two words per topic")
    if successors < 1 or min_doc_len < 2 or max_doc_len < min_doc_len:
        raise ConfigError("invalid document shape")

    rng = np.random.default_rng(seed)
    words = [_pseudo_word(i) for i in range(num_words)]
    topics = [np.arange(t, num_words, num_topics) for t in range(num_topics)]

    zipf = []
    tables = []
    for members in topics:
        k = len(members)
        weights = 1.0 / np.arange(1, k + 1) ** zipf_exponent
        weights /= weights.sum()
        zipf.append(weights)
        tables.append(rng.choice(k, size=(k, k, successors), p=weights))

    successor_p = 1.0 / np.arange(1, successors + 1) ** 2
    successor_p /= successor_p.sum()

    lines = []
    for _ in range(num_docs):
        t = int(rng.integers(num_topics))
        members, table = topics[t], tables[t]
        length = int(rng.integers(min_doc_len, max_doc_len + 1))
        a, b = rng.choice(len(members), size=2, p=zipf[t])
        picks = rng.choice(successors, size=length - 2, p=successor_p)
        local = [int(a), int(b)]
        for s in picks:
            local.append(int(table[local[-2], local[-1], s]))
        lines.append(" ".join(words[members[j]] for j in local))
    return lines
