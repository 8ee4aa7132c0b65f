"""Corruption pipelines for every pre-training objective.

Each pipeline turns a packed Batch into a CorruptedBatch. Positions are
selected first (select_positions), then a replacement generator fills them:
uniform over the non-special vocabulary, the cluster-history sampler, or a
small MLM generator network.
"""

import logging
from dataclasses import dataclass, replace as dc_replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pretraining.corpus import MASK_ID, NUM_SPECIALS, Batch, Vocab
from pretraining.crts import ReplacementSampler
from pretraining.errors import ConfigError, MissingDependencyError, MissingInputError, ObjectiveError

logger = logging.getLogger(__name__)

# Label of positions that never contribute to the loss; below every vocab id
IGNORE_INDEX = -100

# Cluster arrays hold this where no cluster replacement happened
NO_CLUSTER = -1


class Objective(str, Enum):
    MLM = "mlm"
    RTS = "rts"
    CRTS = "crts"
    SLM = "slm"
    SLM_ALL = "slm_all"
    TD_GEN = "td_gen"


class ReplacementSource(str, Enum):
    """Who picks the replacement tokens for SLM and SLM_ALL."""

    UNIFORM = "uniform"
    CRTS = "crts"
    GENERATOR = "generator"


# Objectives scored with the binary (original vs replaced) head
BINARY_OBJECTIVES = frozenset({Objective.RTS, Objective.CRTS, Objective.TD_GEN})


class ObjectiveConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    objective: Objective = Objective.RTS
    replace_rate: float = 0.15
    mlm_mask_frac: float = Field(0.8, ge=0.0, le=1.0)
    mlm_random_frac: float = Field(0.1, ge=0.0, le=1.0)
    seed: int = 0
    replacement: ReplacementSource = ReplacementSource.UNIFORM
    crts_gamma: float = Field(2.0, gt=0)
    crts_clusters: int = Field(100, ge=1)
    temperature: float = 1.0

    @model_validator(mode="after")
    def check_rates(self):
        if not 0.0 < self.replace_rate < 1.0:
            raise ValueError("replace_rate must be in (0, 1)")
        if self.mlm_mask_frac + self.mlm_random_frac > 1.0:
            raise ValueError("mlm_mask_frac + mlm_random_frac must not exceed 1")
        return self

    @property
    def needs_clusters(self) -> bool:
        if self.objective == Objective.CRTS:
            return True
        return self.objective in (Objective.SLM, Objective.SLM_ALL) and self.replacement == ReplacementSource.CRTS

    @property
    def needs_generator(self) -> bool:
        if self.objective == Objective.TD_GEN:
            return True
        return self.objective == Objective.SLM_ALL and self.replacement == ReplacementSource.GENERATOR

    @property
    def binary_head(self) -> bool:
        return self.objective in BINARY_OBJECTIVES


@dataclass
class CorruptedBatch:
    input_ids: np.ndarray
    original_ids: np.ndarray
    corruption_mask: np.ndarray
    labels: np.ndarray
    loss_mask: np.ndarray
    attention_mask: np.ndarray
    objective_tag: Objective
    selected_mask: Optional[np.ndarray] = None
    source_clusters: Optional[np.ndarray] = None
    target_clusters: Optional[np.ndarray] = None
    # MLM batch the generator was run on (generator-driven objectives only)
    generator_batch: Optional["CorruptedBatch"] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.input_ids.shape


def batch_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one batch, derived from (global seed, batch index)."""
    return np.random.default_rng([seed, index])


def select_positions(ids: np.ndarray, attention_mask: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted positions of one row to corrupt: round(rate * E) of the E eligible ones, at least one."""
    eligible = np.flatnonzero(np.asarray(attention_mask, dtype=bool) & (np.asarray(ids) >= NUM_SPECIALS))
    if len(eligible) == 0:
        return eligible
    count = max(1, int(np.floor(rate * len(eligible) + 0.5)))
    return np.sort(rng.choice(eligible, size=count, replace=False))


def select_batch(batch: Batch, rate: float, rng: np.random.Generator) -> np.ndarray:
    selected = np.zeros(batch.ids.shape, dtype=bool)
    for r in range(batch.ids.shape[0]):
        selected[r, select_positions(batch.ids[r], batch.attention_mask[r], rate, rng)] = True
    return selected


def _uniform_replacements(alphas: np.ndarray, vocab_size: int, rng: np.random.Generator) -> np.ndarray:
    num_candidates = vocab_size - NUM_SPECIALS
    if num_candidates < 2:
        raise ObjectiveError("vocab needs at least two non-special tokens")
    betas = NUM_SPECIALS + rng.integers(0, num_candidates - 1, size=alphas.shape)
    return betas + (betas >= alphas)


def _binary_labels(corruption_mask: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    return np.where(attention_mask, corruption_mask.astype(np.int64), IGNORE_INDEX)


def replace_at(
    batch: Batch,
    selected: np.ndarray,
    vocab: Vocab,
    rng: np.random.Generator,
    sampler: Optional[ReplacementSampler] = None,
) -> CorruptedBatch:
    """Replace the selected positions and label the result for token detection.

    Uses the cluster sampler when given, else uniform draws. The original
    token is never drawn again.
    """
    original = batch.ids
    attention = np.asarray(batch.attention_mask, dtype=bool)
    rows, cols = np.nonzero(selected)
    alphas = original[rows, cols]

    source = np.full(original.shape, NO_CLUSTER, dtype=np.int64)
    target = np.full(original.shape, NO_CLUSTER, dtype=np.int64)
    if sampler is None:
        betas = _uniform_replacements(alphas, vocab.size, rng)
        tag = Objective.RTS
    else:
        if sampler.vocab_size != vocab.size:
            raise ObjectiveError(f"cluster model covers {sampler.vocab_size} ids, vocab has {vocab.size}")
        betas, src, tgt = sampler.sample(alphas, rng)
        source[rows, cols] = src
        target[rows, cols] = tgt
        tag = Objective.CRTS

    inputs = original.copy()
    inputs[rows, cols] = betas
    corruption = selected.copy()
    return CorruptedBatch(
        input_ids=inputs,
        original_ids=original.copy(),
        corruption_mask=corruption,
        labels=_binary_labels(corruption, attention),
        loss_mask=attention.copy(),
        attention_mask=attention.copy(),
        objective_tag=tag,
        selected_mask=selected.copy(),
        source_clusters=source,
        target_clusters=target,
    )


def corrupt_rts(batch: Batch, vocab: Vocab, cfg: ObjectiveConfig, rng: np.random.Generator) -> CorruptedBatch:
    selected = select_batch(batch, cfg.replace_rate, rng)
    return replace_at(batch, selected, vocab, rng)


def corrupt_crts(
    batch: Batch, crts_state: ReplacementSampler, vocab: Vocab, cfg: ObjectiveConfig, rng: np.random.Generator
) -> CorruptedBatch:
    """RTS with replacements from the cluster-history sampler.

    crts_state is a frozen snapshot of (F, clusters); the per-position
    source/target clusters are kept for the count update.
    """
    selected = select_batch(batch, cfg.replace_rate, rng)
    return replace_at(batch, selected, vocab, rng, sampler=crts_state)


def corrupt_slm(
    batch: Batch,
    vocab: Vocab,
    cfg: ObjectiveConfig,
    rng: np.random.Generator,
    crts_state: Optional[ReplacementSampler] = None,
) -> CorruptedBatch:
    """Swap selected tokens for real ones (never MASK) and predict the originals there."""
    selected = select_batch(batch, cfg.replace_rate, rng)
    sampler = crts_state if cfg.replacement == ReplacementSource.CRTS else None
    cb = replace_at(batch, selected, vocab, rng, sampler=sampler)
    return dc_replace(
        cb,
        labels=np.where(selected, cb.original_ids, IGNORE_INDEX),
        loss_mask=selected.copy(),
        objective_tag=Objective.SLM,
    )


def corrupt_mlm(batch: Batch, vocab: Vocab, cfg: ObjectiveConfig, rng: np.random.Generator) -> CorruptedBatch:
    """BERT masking: of the selected positions, mask / random token / keep."""
    if vocab.num_candidates < 2:
        raise ObjectiveError("vocab needs at least two non-special tokens")
    selected = select_batch(batch, cfg.replace_rate, rng)
    return _mask_selected(batch, selected, vocab, cfg.mlm_mask_frac, cfg.mlm_random_frac, rng)


def _mask_selected(
    batch: Batch, selected: np.ndarray, vocab: Vocab, mask_frac: float, random_frac: float, rng: np.random.Generator
) -> CorruptedBatch:
    original = batch.ids
    attention = np.asarray(batch.attention_mask, dtype=bool)
    rows, cols = np.nonzero(selected)
    u = rng.random(len(rows))
    to_mask = u < mask_frac
    to_random = (u >= mask_frac) & (u < mask_frac + random_frac)

    inputs = original.copy()
    inputs[rows[to_mask], cols[to_mask]] = MASK_ID
    if to_random.any():
        # may coincide with the original token
        random_ids = rng.integers(NUM_SPECIALS, vocab.size, size=int(to_random.sum()))
        inputs[rows[to_random], cols[to_random]] = random_ids

    return CorruptedBatch(
        input_ids=inputs,
        original_ids=original.copy(),
        corruption_mask=selected.copy(),
        labels=np.where(selected, original, IGNORE_INDEX),
        loss_mask=selected.copy(),
        attention_mask=attention.copy(),
        objective_tag=Objective.MLM,
        selected_mask=selected.copy(),
    )


def targets_slm_all(cb: CorruptedBatch) -> CorruptedBatch:
    """Ask for the original token at every non-PAD position."""
    if cb.objective_tag == Objective.MLM or (cb.input_ids == MASK_ID).any():
        raise ObjectiveError("SLM-all forbids MASK")
    attention = np.asarray(cb.attention_mask, dtype=bool)
    return dc_replace(
        cb,
        labels=np.where(attention, cb.original_ids, IGNORE_INDEX),
        loss_mask=attention.copy(),
        objective_tag=Objective.SLM_ALL,
    )


def generator_inputs(batch: Batch, selected: np.ndarray, vocab: Vocab) -> CorruptedBatch:
    """MLM batch for the generator: every selected position becomes MASK."""
    return _mask_selected(batch, selected, vocab, 1.0, 0.0, np.random.default_rng(0))


def sample_tokens(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """One token per row of logits; Gumbel-max at the temperature, argmax when it is <= 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        return np.argmax(logits, axis=-1)
    return np.argmax(logits / temperature + rng.gumbel(size=logits.shape), axis=-1)


def corrupt_with_generator(
    batch: Batch,
    generator,
    vocab: Vocab,
    cfg: ObjectiveConfig,
    rng: np.random.Generator,
    temperature: Optional[float] = None,
) -> CorruptedBatch:
    """Token detection with replacements sampled from a small MLM generator.

    generator is a (params, ModelConfig) pair with an LM head. A sample that
    equals the original token counts as original.
    """
    from pretraining.model import HeadType, forward

    gen_params, gen_config = generator
    if gen_config.vocab_size != vocab.size:
        raise ObjectiveError(f"generator vocab size {gen_config.vocab_size} does not match vocab of {vocab.size}")
    if gen_config.head_type != HeadType.LM:
        raise ObjectiveError("generator needs an LM head")
    if temperature is None:
        temperature = cfg.temperature

    selected = select_batch(batch, cfg.replace_rate, rng)
    gen_batch = generator_inputs(batch, selected, vocab)
    logits, _ = forward(gen_params, gen_config, gen_batch)

    rows, cols = np.nonzero(selected)
    position_logits = np.array(logits[rows, cols], dtype=np.float64)
    position_logits[:, :NUM_SPECIALS] = -np.inf
    sampled = sample_tokens(position_logits, temperature, rng)

    original = batch.ids
    attention = np.asarray(batch.attention_mask, dtype=bool)
    inputs = original.copy()
    inputs[rows, cols] = sampled
    corruption = inputs != original
    return CorruptedBatch(
        input_ids=inputs,
        original_ids=original.copy(),
        corruption_mask=corruption,
        labels=_binary_labels(corruption, attention),
        loss_mask=attention.copy(),
        attention_mask=attention.copy(),
        objective_tag=Objective.TD_GEN,
        selected_mask=selected,
        generator_batch=gen_batch,
    )


def corrupt(
    batch: Batch,
    vocab: Vocab,
    cfg: ObjectiveConfig,
    rng: np.random.Generator,
    crts_state: Optional[ReplacementSampler] = None,
    generator=None,
) -> CorruptedBatch:
    """Run the pipeline cfg.objective names."""
    if cfg.needs_clusters and crts_state is None:
        raise MissingDependencyError(f"objective {cfg.objective.value} needs a cluster model")
    if cfg.needs_generator and generator is None:
        raise MissingDependencyError(f"objective {cfg.objective.value} needs a generator")

    objective = cfg.objective
    if objective == Objective.MLM:
        return corrupt_mlm(batch, vocab, cfg, rng)
    if objective == Objective.RTS:
        return corrupt_rts(batch, vocab, cfg, rng)
    if objective == Objective.CRTS:
        return corrupt_crts(batch, crts_state, vocab, cfg, rng)
    if objective == Objective.TD_GEN:
        return corrupt_with_generator(batch, generator, vocab, cfg, rng)
    if objective == Objective.SLM:
        if cfg.replacement == ReplacementSource.GENERATOR:
            raise ConfigError("SLM takes uniform or crts replacements")
        return corrupt_slm(batch, vocab, cfg, rng, crts_state=crts_state)

    # SLM_ALL
    if cfg.replacement == ReplacementSource.GENERATOR:
        return targets_slm_all(corrupt_with_generator(batch, generator, vocab, cfg, rng))
    if cfg.replacement == ReplacementSource.CRTS:
        return targets_slm_all(corrupt_crts(batch, crts_state, vocab, cfg, rng))
    return targets_slm_all(corrupt_rts(batch, vocab, cfg, rng))


class _DumpHeader(BaseModel):
    objective: Objective
    seed: int
    rows: int
    length: int


class _DumpRow(BaseModel):
    input_ids: List[int]
    original_ids: List[int]
    labels: List[int]
    corruption_mask: List[int]
    loss_mask: List[int]
    attention_mask: List[int]


def dump_corrupted(cb: CorruptedBatch, seed: int, path) -> None:
    """Write a header record and one record per row, one JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, length = cb.shape
    with open(path, "w", encoding="utf-8") as f:
        f.write(_DumpHeader(objective=cb.objective_tag, seed=seed, rows=rows, length=length).model_dump_json() + "\n")
        for r in range(rows):
            record = _DumpRow(
                input_ids=cb.input_ids[r].tolist(),
                original_ids=cb.original_ids[r].tolist(),
                labels=cb.labels[r].tolist(),
                corruption_mask=cb.corruption_mask[r].astype(int).tolist(),
                loss_mask=cb.loss_mask[r].astype(int).tolist(),
                attention_mask=np.asarray(cb.attention_mask[r]).astype(int).tolist(),
            )
            f.write(record.model_dump_json() + "\n")


def load_corrupted(path) -> Tuple[CorruptedBatch, int]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"corrupted batch dump not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    header = _DumpHeader.model_validate_json(lines[0])
    records = [_DumpRow.model_validate_json(line) for line in lines[1:]]
    if len(records) != header.rows:
        raise ObjectiveError(f"dump {path} declares {header.rows} rows, found {len(records)}")

    def stack(name, dtype):
        return np.asarray([getattr(rec, name) for rec in records], dtype=dtype).reshape(header.rows, header.length)

    cb = CorruptedBatch(
        input_ids=stack("input_ids", np.int64),
        original_ids=stack("original_ids", np.int64),
        corruption_mask=stack("corruption_mask", bool),
        labels=stack("labels", np.int64),
        loss_mask=stack("loss_mask", bool),
        attention_mask=stack("attention_mask", bool),
        objective_tag=header.objective,
    )
    return cb, header.seed
