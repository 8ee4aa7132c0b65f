"""Command settings resolved from flags, a key=value config file and the environment.

Precedence: command-line flag > config file > environment > model default.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError

import config as env_config
from pretraining.errors import ConfigError, MissingInputError
from pretraining.flops import GeneratorHead
from pretraining.objectives import Objective, ReplacementSource

logger = logging.getLogger(__name__)

S = TypeVar("S", bound="CommonSettings")


class CommonSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = env_config.DEFAULT_SEED
    out: Path = Path(env_config.RUNS_DIR)
    threads: int = Field(env_config.DEFAULT_THREADS, ge=1)
    reference: bool = True


class GenCorpusSettings(CommonSettings):
    docs: int = Field(5000, ge=1)
    words: int = Field(600, ge=2)
    topics: int = Field(10, ge=1)
    min_doc_len: int = Field(20, ge=2)
    max_doc_len: int = Field(60, ge=2)


class BuildVocabSettings(CommonSettings):
    corpus: Path
    max_size: int = 30000
    min_freq: int = 1


class TrainEmbeddingsSettings(CommonSettings):
    corpus: Path
    vocab: Path
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    batch_pairs: int = 256


class ClusterSettings(CommonSettings):
    embeddings: Path
    vocab: Path
    clusters: int = env_config.DEFAULT_CLUSTER_COUNT
    max_iter: int = 100


class PretrainSettings(CommonSettings):
    corpus: Path
    vocab: Path
    objective: Objective = Objective.RTS
    replacement: ReplacementSource = ReplacementSource.UNIFORM
    cluster_file: Optional[Path] = None
    gamma: float = env_config.DEFAULT_GAMMA
    replace_rate: float = 0.15
    mlm_mask_frac: float = 0.8
    mlm_random_frac: float = 0.1
    temperature: float = 1.0
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    intermediate: int = 256
    max_len: int = 64
    dropout: float = 0.0
    steps: int = 2000
    total_steps: Optional[int] = None
    warmup: int = 100
    batch_size: int = 32
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    disc_weight: float = 50.0
    seq_len_schedule: Optional[str] = None
    log_every: int = 50
    eval_every: int = 100
    checkpoint_every: int = 0
    resume: Optional[Path] = None


def _grid_text(values) -> str:
    return ",".join(str(v) for v in values)


class SweepSettings(PretrainSettings):
    embeddings: Path
    objective: Objective = Objective.CRTS
    cluster_grid: str = _grid_text(env_config.CLUSTER_COUNT_GRID)
    gamma_grid: str = _grid_text(env_config.GAMMA_GRID)
    heldout_batches: int = Field(20, ge=1)
    max_iter: int = 100


class ProbeSettings(CommonSettings):
    checkpoint: Path
    corpus: Path
    vocab: Path
    cluster_file: Optional[Path] = None
    count_matrix: Optional[Path] = None
    batches: int = Field(20, ge=1)


class FlopsSettings(CommonSettings):
    preset: Literal["base", "desk"] = "base"
    generator_head: GeneratorHead = GeneratorHead.ALL
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    intermediate: int = 256
    max_len: int = 64
    vocab_size: int = 605
    steps: int = 2000
    batch_size: int = 32


def parse_schedule(text: Optional[str]) -> List[Tuple[int, int]]:
    """Parse phases written as steps:max_len, comma separated (e.g. 800000:128,100000:512)."""
    if not text:
        return []
    phases = []
    for part in text.split(","):
        try:
            steps, max_len = part.split(":")
            phases.append((int(steps), int(max_len)))
        except ValueError as e:
            raise ConfigError(f"bad seq_len_schedule phase {part!r}; expected steps:max_len") from e
    return phases


def parse_grid(text: str, kind: Type = float) -> List:
    """Parse a comma-separated grid of positive values (e.g. 30,100,300)."""
    try:
        values = [kind(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}; expected comma-separated numbers") from e
    if not values:
        raise ConfigError("grid must name at least one value")
    if any(v <= 0 for v in values):
        raise ConfigError(f"grid values must be positive: {text!r}")
    return values


def read_config_file(path) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigError(f"config key {key!r} in {path} has no value")
        values[key.strip().replace("-", "_")] = value
    return values


def resolve(settings_cls: Type[S], flags: Dict[str, Any], config_path=None) -> S:
    """Merge the four layers and validate; unknown config-file keys are an error."""
    fields = set(settings_cls.model_fields)
    values: Dict[str, Any] = {
        key: value for key, value in env_config.ENV_SETTINGS.items() if value is not None and key in fields
    }
    if config_path is not None:
        file_values = read_config_file(config_path)
        unknown = sorted(set(file_values) - fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(file_values)
    values.update({key: value for key, value in flags.items() if value is not None and key in fields})
    try:
        return settings_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid settings: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e
