"""Training-cost (FLOPs) estimator.

A multiply-add counts as two FLOPs. The backward pass costs twice the
forward pass, so a training step costs three forwards. Only the embedding
rows a token touches are charged.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import pandas as pd

from pretraining.errors import ConfigError
from pretraining.model import HeadType, ModelConfig
from pretraining.objectives import Objective, ObjectiveConfig, ReplacementSource
from pretraining.train import (
    GENERATOR_PHASES,
    GENERATOR_STEP_RATIO,
    BASE_BATCH_SIZE,
    SINGLE_MODEL_PHASES,
    generator_config_for,
)

logger = logging.getLogger(__name__)

BACKWARD_MULTIPLIER = 2.0

# Generator embeddings are tied to the discriminator's width
BASE_GENERATOR_EMBEDDING = 768

Phases = Sequence[Tuple[int, int]]


class GeneratorHead(str, Enum):
    """Positions the generator's LM head is charged for."""

    ALL = "all"
    SELECTED = "selected"


@dataclass(frozen=True)
class CostModel:
    """Per-token forward cost of one network at one sequence length."""

    encoder: float
    embedding: float
    head: float
    backward_multiplier: float = BACKWARD_MULTIPLIER

    @property
    def forward(self) -> float:
        return self.encoder + self.embedding + self.head

    @property
    def training(self) -> float:
        return self.forward * (1.0 + self.backward_multiplier)


@dataclass
class FlopsEntry:
    name: str
    flops: float


def cost_model(
    config: ModelConfig,
    seq_len: int,
    head: HeadType,
    head_fraction: float = 1.0,
    embedding_size: Optional[int] = None,
) -> CostModel:
    """Per-token costs: attention projections 8h^2, feed-forward 4hi and the
    two L-by-h score products 4Lh per layer, plus embeddings and head."""
    h, i = config.hidden, config.intermediate
    per_layer = 8 * h * h + 4 * h * i + 4 * seq_len * h
    embedding = 2.0 * h
    if embedding_size is not None and embedding_size != h:
        # project embeddings in, and hidden states back out for the tied head
        embedding = 2.0 * embedding_size + 2 * (2 * embedding_size * h)
    if head == HeadType.BINARY:
        head_cost = 2.0 * h
    else:
        width = embedding_size or h
        head_cost = 2.0 * width * config.vocab_size * head_fraction
    return CostModel(encoder=float(config.layers * per_layer), embedding=embedding, head=head_cost)


def network_flops(
    config: ModelConfig,
    phases: Phases,
    batch_size: int,
    head: HeadType,
    head_fraction: float = 1.0,
    embedding_size: Optional[int] = None,
) -> float:
    """Training FLOPs of one network over (steps, seq_len) phases."""
    total = 0.0
    for steps, seq_len in phases:
        per_token = cost_model(config, seq_len, head, head_fraction, embedding_size).training
        total += per_token * steps * batch_size * seq_len
    return total


def estimate(
    discriminator: ModelConfig,
    phases: Phases,
    batch_size: int,
    objective: ObjectiveConfig,
    generator: Optional[ModelConfig] = None,
    generator_head: GeneratorHead = GeneratorHead.ALL,
    generator_embedding: Optional[int] = None,
) -> float:
    """Total training FLOPs of an objective; generator-bearing ones add the generator."""
    rate = objective.replace_rate
    kind = objective.objective
    if kind in (Objective.RTS, Objective.CRTS, Objective.TD_GEN):
        total = network_flops(discriminator, phases, batch_size, HeadType.BINARY)
    elif kind in (Objective.MLM, Objective.SLM):
        total = network_flops(discriminator, phases, batch_size, HeadType.LM, head_fraction=rate)
    else:
        total = network_flops(discriminator, phases, batch_size, HeadType.LM, head_fraction=1.0)

    if objective.needs_generator:
        if generator is None:
            raise ConfigError(f"objective {kind.value} needs a generator config")
        fraction = 1.0 if generator_head == GeneratorHead.ALL else rate
        total += network_flops(generator, phases, batch_size, HeadType.LM, fraction, generator_embedding)
    return total


def base_entries(generator_head: GeneratorHead = GeneratorHead.ALL) -> List[FlopsEntry]:
    """Cost of every objective at the published base-model budgets."""
    base = ModelConfig.base_size()
    generator = ModelConfig.base_generator()
    setups = [
        ("rts", ObjectiveConfig(objective=Objective.RTS)),
        ("crts", ObjectiveConfig(objective=Objective.CRTS)),
        ("mlm", ObjectiveConfig(objective=Objective.MLM)),
        ("slm", ObjectiveConfig(objective=Objective.SLM)),
        ("td_gen", ObjectiveConfig(objective=Objective.TD_GEN)),
        ("slm_all_generator", ObjectiveConfig(objective=Objective.SLM_ALL, replacement=ReplacementSource.GENERATOR)),
    ]
    entries = []
    for name, objective in setups:
        phases = GENERATOR_PHASES if objective.needs_generator else SINGLE_MODEL_PHASES
        flops = estimate(
            base, phases, BASE_BATCH_SIZE, objective, generator=generator,
            generator_head=generator_head, generator_embedding=BASE_GENERATOR_EMBEDDING,
        )
        entries.append(FlopsEntry(name=name, flops=flops))
    return entries


def desk_entries(config: ModelConfig, phases: Phases, batch_size: int) -> List[FlopsEntry]:
    """Same comparison at a desk-scale shape; generator steps scaled like the base run's."""
    generator_phases = [(int(round(steps * GENERATOR_STEP_RATIO)), seq_len) for steps, seq_len in phases]
    generator = generator_config_for(config)
    entries = []
    for kind in (Objective.RTS, Objective.MLM, Objective.TD_GEN):
        objective = ObjectiveConfig(objective=kind)
        plan = generator_phases if objective.needs_generator else phases
        entries.append(FlopsEntry(kind.value, estimate(config, plan, batch_size, objective, generator=generator)))
    return entries


def report(entries: Sequence[FlopsEntry]) -> pd.DataFrame:
    """Table of (name, flops, ratio) with the first entry as the baseline."""
    if not entries:
        raise ConfigError("report needs at least one entry")
    frame = pd.DataFrame({"name": [e.name for e in entries], "flops": [float(e.flops) for e in entries]})
    baseline = frame["flops"].iloc[0]
    frame["ratio"] = frame["flops"] / baseline if baseline else float("nan")
    return frame


def format_report(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, formatters={"flops": "{:.3e}".format, "ratio": "{:.4f}".format})


def report_jsonl(frame: pd.DataFrame) -> str:
    return frame.to_json(orient="records", lines=True)
