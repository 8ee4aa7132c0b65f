"""Pre-training loop: schedule, Adam with decoupled weight decay, count-matrix
feedback, held-out evaluation, checkpoints and the hardness probe."""

import logging
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from pretraining.cluster import ClusterModel
from pretraining.corpus import Batch, TokenSequence, Vocab, pack_batches
from pretraining.crts import CountMatrix, OutcomeDelta, ReplacementSampler, initial_state, update_counts
from pretraining.errors import (
    ConfigError,
    HeadMismatchError,
    MissingDependencyError,
    MissingInputError,
    TrainingError,
)
from pretraining.model import (
    HeadType,
    ModelConfig,
    Params,
    backward,
    forward,
    init_params,
    loss,
    predict_binary,
)
from pretraining.objectives import (
    CorruptedBatch,
    ObjectiveConfig,
    batch_rng,
    corrupt,
    replace_at,
    select_batch,
)

logger = logging.getLogger(__name__)

# Generator-bearing objectives train for 766K of the 900K single-model steps
GENERATOR_STEP_RATIO = 766 / 900

# Phase plans as (steps, max_len): 128 tokens first, 512 at the end
SINGLE_MODEL_PHASES = [(800_000, 128), (100_000, 512)]
GENERATOR_PHASES = [(689_000, 128), (77_000, 512)]
BASE_BATCH_SIZE = 256

# Stream tags keeping data order, evaluation and probes apart from step streams
_DATA_STREAM = 1
_EVAL_STREAM = 2
_PROBE_STREAM = 3
_DROPOUT_STREAM = 4

# Settings that may differ between a checkpoint and the run resuming it
_RESUME_FREE_KEYS = {"log_every", "eval_every", "checkpoint_every"}

CHECKPOINT_FORMAT = 1


def derive_total_steps(base_steps: int, objective: ObjectiveConfig) -> int:
    if objective.needs_generator:
        return int(round(base_steps * GENERATOR_STEP_RATIO))
    return base_steps


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    peak_lr: float = Field(1e-4, gt=0)
    adam_eps: float = Field(1e-8, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    warmup_steps: int = Field(100, ge=0)
    base_steps: int = Field(2000, ge=1)
    total_steps: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    seed: int = 0
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    seq_len_schedule: List[Tuple[int, int]] = Field(default_factory=list)
    log_every: int = Field(50, ge=1)
    eval_every: int = Field(0, ge=0)
    eval_batches: int = Field(8, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    disc_weight: float = Field(50.0, gt=0)
    holdout_frac: float = Field(0.05, gt=0, lt=1)
    reference: bool = True

    @model_validator(mode="after")
    def derive_steps(self):
        if self.total_steps is None:
            self.total_steps = derive_total_steps(self.base_steps, self.objective)
        if self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})")
        for steps, max_len in self.seq_len_schedule:
            if steps < 1 or max_len < 3:
                raise ValueError("seq_len_schedule phases need steps >= 1 and max_len >= 3")
        return self

    @classmethod
    def base(cls, objective: ObjectiveConfig) -> "TrainConfig":
        phases = GENERATOR_PHASES if objective.needs_generator else SINGLE_MODEL_PHASES
        return cls(
            peak_lr=1e-4, warmup_steps=10_000, base_steps=900_000, batch_size=BASE_BATCH_SIZE,
            objective=objective, seq_len_schedule=phases,
        )


class MetricsRecord(BaseModel):
    step: int
    split: Literal["train", "eval"] = "train"
    loss: float
    lr: Optional[float] = None
    wall_ms: float = 0.0
    discriminator_accuracy: Optional[float] = None
    replaced_accuracy: Optional[float] = None
    replaced_ce: Optional[float] = None
    generator_loss: Optional[float] = None
    replaced_positions: Optional[int] = None


@dataclass
class AdamMoments:
    m: Params
    v: Params

    @classmethod
    def zeros(cls, params: Params) -> "AdamMoments":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


@dataclass
class TrainState:
    params: Params
    moments: AdamMoments
    step: int = 0
    count_matrix: Optional[CountMatrix] = None
    generator_params: Optional[Params] = None
    generator_moments: Optional[AdamMoments] = None


@dataclass
class EvalResult:
    loss: float
    discriminator_accuracy: Optional[float] = None
    replaced_ce: Optional[float] = None
    replaced_accuracy: Optional[float] = None
    positions: int = 0


@dataclass
class HardnessReport:
    acc_uniform: float
    acc_crts: float
    positions: int


@dataclass
class PretrainResult:
    state: TrainState
    metrics: List[MetricsRecord] = field(default_factory=list)
    heldout: List[Batch] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to peak_lr, then linear decay to 0 at total_steps."""
    total, warmup = cfg.total_steps, cfg.warmup_steps
    if not 0 <= step <= total:
        raise TrainingError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return cfg.peak_lr * (step / warmup)
    return cfg.peak_lr * ((total - step) / (total - warmup))


def decays(name: str) -> bool:
    """Weight decay applies to matrices only, never to biases or layer-norm gains."""
    return name.endswith(".weight")


def adam_step(
    params: Params, grads: Params, moments: AdamMoments, step: int, cfg: TrainConfig, lr: float
) -> Tuple[Params, AdamMoments]:
    """One bias-corrected Adam update with decoupled weight decay; step counts from 1."""
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}")
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * g * g
        if decays(name):
            p = p * (1.0 - lr * cfg.weight_decay)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamMoments(m=new_m, v=new_v)


def clip_by_global_norm(groups: List[Params], max_norm: float) -> Tuple[List[Params], float]:
    """Scale every gradient group by one factor so their joint norm is at most max_norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for grads in groups for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return groups, norm
    scale = max_norm / norm
    return [{name: g * scale for name, g in grads.items()} for grads in groups], norm


def generator_config_for(discriminator: ModelConfig) -> ModelConfig:
    """Quarter-width LM generator of the same depth, sharing the vocab."""
    heads = max(1, discriminator.heads // 4)
    hidden = max(heads, (discriminator.hidden // 4) // heads * heads)
    return discriminator.model_copy(update={
        "hidden": hidden,
        "heads": heads,
        "intermediate": max(1, discriminator.intermediate // 4),
        "head_type": HeadType.LM,
    })


def split_batches(
    corpus: Sequence[TokenSequence], max_len: int, cfg: TrainConfig
) -> Tuple[List[Batch], List[Batch]]:
    """Packed (train, held-out) batches; the last holdout_frac of batches is held out."""
    batches = list(pack_batches(corpus, max_len, cfg.batch_size, cfg.seed))
    if len(batches) < 2:
        raise TrainingError(f"corpus packs into {len(batches)} batch(es); need at least two")
    held = max(1, int(round(cfg.holdout_frac * len(batches))))
    return batches[:-held], batches[-held:]


def max_len_at(step: int, cfg: TrainConfig, default: int) -> int:
    start = 0
    for steps, max_len in cfg.seq_len_schedule:
        if step < start + steps:
            return max_len
        start += steps
    return cfg.seq_len_schedule[-1][1] if cfg.seq_len_schedule else default


def balanced_accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class recall of boolean predictions; chance level is 0.5."""
    predicted = np.asarray(predicted, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    recalls = [float((predicted[labels == c] == c).mean()) for c in (False, True) if (labels == c).any()]
    return float(np.mean(recalls)) if recalls else 0.0


def outcome_delta(cb: CorruptedBatch, logits: np.ndarray) -> OutcomeDelta:
    """Count-matrix delta of one batch: was each cluster replacement caught?"""
    if cb.source_clusters is None:
        return OutcomeDelta()
    mask = np.asarray(cb.corruption_mask, dtype=bool) & (cb.source_clusters >= 0)
    if logits.shape[-1] == 1:
        correct = predict_binary(logits)[mask]
    else:
        correct = np.argmax(logits, axis=-1)[mask] == cb.original_ids[mask]
    return OutcomeDelta.from_arrays(cb.source_clusters[mask], cb.target_clusters[mask], correct)


def _replaced_stats(cb: CorruptedBatch, logits: np.ndarray) -> Tuple[float, int, int]:
    """(summed cross-entropy, correct argmax count, positions) at corrupted positions."""
    mask = np.asarray(cb.corruption_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, 0, 0
    z = logits[mask].astype(np.float64)
    y = cb.original_ids[mask]
    top = z.max(axis=-1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(z - top).sum(axis=-1))
    ce = float((lse - z[np.arange(n), y]).sum())
    return ce, int((np.argmax(z, axis=-1) == y).sum()), n


def evaluate(
    params: Params,
    config: ModelConfig,
    batches: Sequence[Batch],
    vocab: Vocab,
    objective: ObjectiveConfig,
    seed: int,
    crts_state: Optional[ReplacementSampler] = None,
    generator=None,
) -> EvalResult:
    """Score held-out batches under fixed per-batch corruption streams."""
    loss_sum, loss_positions = 0.0, 0
    predicted, truth = [], []
    ce_sum, hits, replaced = 0.0, 0, 0
    for index, batch in enumerate(batches):
        rng = np.random.default_rng([seed, _EVAL_STREAM, index])
        cb = corrupt(batch, vocab, objective, rng, crts_state=crts_state, generator=generator)
        logits, _ = forward(params, config, cb)
        n = int(np.asarray(cb.loss_mask).sum())
        loss_sum += loss(cb, logits) * n
        loss_positions += n
        if config.head_type == HeadType.BINARY:
            mask = np.asarray(cb.loss_mask, dtype=bool)
            predicted.append(predict_binary(logits)[mask])
            truth.append(cb.labels[mask] == 1)
        else:
            ce, correct, count = _replaced_stats(cb, logits)
            ce_sum += ce
            hits += correct
            replaced += count

    result = EvalResult(loss=loss_sum / loss_positions if loss_positions else 0.0, positions=loss_positions)
    if config.head_type == HeadType.BINARY:
        result.discriminator_accuracy = balanced_accuracy(np.concatenate(predicted), np.concatenate(truth))
    elif replaced:
        result.replaced_ce = ce_sum / replaced
        result.replaced_accuracy = hits / replaced
    return result


def save_checkpoint(
    path,
    state: TrainState,
    model_config: ModelConfig,
    train_config: TrainConfig,
    generator_config: Optional[ModelConfig] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model_config.model_dump(mode="json"),
        "train_config": train_config.model_dump(mode="json"),
        "generator_config": generator_config.model_dump(mode="json") if generator_config else None,
        "params": state.params,
        "moments": {"m": state.moments.m, "v": state.moments.v},
        "step": state.step,
        "rng": {"seed": train_config.seed, "next_step": state.step},
        "count_matrix": None,
        "generator": None,
    }
    if state.count_matrix is not None:
        payload["count_matrix"] = {"F": state.count_matrix.F, "gamma": state.count_matrix.gamma}
    if state.generator_params is not None:
        payload["generator"] = {
            "params": state.generator_params,
            "moments": {"m": state.generator_moments.m, "v": state.generator_moments.v},
        }
    with open(path, "wb") as f:
        pickle.dump(payload, f)
    logger.info("Saved checkpoint at step %d to %s", state.step, path)
    return path


def load_checkpoint(path) -> Tuple[TrainState, ModelConfig, TrainConfig, Optional[ModelConfig]]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        payload = pickle.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"unsupported checkpoint format in {path}")

    try:
        model_config = ModelConfig.model_validate(payload["model_config"])
        train_config = TrainConfig.model_validate(payload["train_config"])
        generator_config = (
            ModelConfig.model_validate(payload["generator_config"]) if payload["generator_config"] else None
        )
    except ValidationError as e:
        raise TrainingError(f"checkpoint {path} holds invalid configs: {e}") from e

    cm = None
    if payload["count_matrix"] is not None:
        cm = CountMatrix(F=payload["count_matrix"]["F"], gamma=payload["count_matrix"]["gamma"])
    state = TrainState(
        params=payload["params"],
        moments=AdamMoments(**payload["moments"]),
        step=payload["step"],
        count_matrix=cm,
    )
    if payload["generator"] is not None:
        state.generator_params = payload["generator"]["params"]
        state.generator_moments = AdamMoments(**payload["generator"]["moments"])
    return state, model_config, train_config, generator_config


def _comparable(cfg: BaseModel) -> Dict:
    return {k: v for k, v in cfg.model_dump(mode="json").items() if k not in _RESUME_FREE_KEYS}


def _check_setup(vocab, model_config, train_config, clusters, generator_config) -> None:
    objective = train_config.objective
    if model_config.vocab_size != vocab.size:
        raise ConfigError(f"model vocab size {model_config.vocab_size} does not match vocab of {vocab.size}")
    wants = HeadType.BINARY if objective.binary_head else HeadType.LM
    if model_config.head_type != wants:
        raise HeadMismatchError(
            f"objective {objective.objective.value} needs a {wants.value} head, model has {model_config.head_type.value}"
        )
    if objective.needs_clusters:
        if clusters is None:
            raise MissingDependencyError(f"objective {objective.objective.value} needs a cluster model")
        if clusters.vocab_size != vocab.size:
            raise ConfigError(f"cluster model covers {clusters.vocab_size} ids, vocab has {vocab.size}")
    if generator_config is not None and generator_config.vocab_size != vocab.size:
        raise ConfigError("generator vocab size does not match the vocab")
    for _, max_len in train_config.seq_len_schedule:
        if max_len > model_config.max_len:
            raise ConfigError(f"schedule length {max_len} exceeds model max_len {model_config.max_len}")


class _BatchSource:
    """Step -> batch mapping that only depends on the step, so resumed runs see the same data."""

    def __init__(self, corpus, cfg: TrainConfig, default_len: int):
        self.corpus = corpus
        self.cfg = cfg
        self.default_len = default_len
        self.packs: Dict[int, Tuple[List[Batch], List[Batch]]] = {}
        self.orders: Dict[Tuple[int, int], np.ndarray] = {}

    def split(self, max_len: int) -> Tuple[List[Batch], List[Batch]]:
        if max_len not in self.packs:
            self.packs[max_len] = split_batches(self.corpus, max_len, self.cfg)
        return self.packs[max_len]

    def at(self, step: int) -> Batch:
        max_len = max_len_at(step, self.cfg, self.default_len)
        train, _ = self.split(max_len)
        epoch, offset = divmod(step, len(train))
        key = (max_len, epoch)
        if key not in self.orders:
            self.orders[key] = np.random.default_rng([self.cfg.seed, _DATA_STREAM, epoch]).permutation(len(train))
        return train[self.orders[key][offset]]


def pretrain(
    corpus: Sequence[TokenSequence],
    vocab: Vocab,
    model_config: ModelConfig,
    train_config: TrainConfig,
    clusters: Optional[ClusterModel] = None,
    generator_config: Optional[ModelConfig] = None,
    out_dir=None,
    resume_from=None,
    stop_after: Optional[int] = None,
    progress: bool = False,
) -> PretrainResult:
    """Run pack -> corrupt -> forward -> loss -> backward -> adam_step (-> update_counts).

    With out_dir, metrics go to metrics.jsonl and the final state to
    checkpoint.pkl there. stop_after ends the run early (the schedule still
    spans total_steps), which together with resume_from gives bit-exact
    continuation.
    """
    corpus = list(corpus)
    cfg = train_config
    objective = cfg.objective
    if objective.needs_generator and generator_config is None:
        generator_config = generator_config_for(model_config)
    _check_setup(vocab, model_config, cfg, clusters, generator_config)

    if resume_from is not None:
        state, saved_model, saved_train, saved_gen = load_checkpoint(resume_from)
        mismatch = saved_model != model_config or _comparable(saved_train) != _comparable(cfg)
        if saved_gen is not None and saved_gen != generator_config:
            mismatch = True
        if mismatch:
            raise TrainingError(f"checkpoint {resume_from} was written for a different configuration")
        logger.info("Resuming from %s at step %d", resume_from, state.step)
    else:
        params = init_params(model_config, cfg.seed)
        state = TrainState(params=params, moments=AdamMoments.zeros(params))
        if objective.needs_clusters:
            state.count_matrix = initial_state(clusters, objective.crts_gamma)
        if generator_config is not None:
            state.generator_params = init_params(generator_config, cfg.seed + 1)
            state.generator_moments = AdamMoments.zeros(state.generator_params)

    source = _BatchSource(corpus, cfg, model_config.max_len)
    end = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)

    metrics_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "a" if resume_from is not None else "w", encoding="utf-8")

    sampler = ReplacementSampler(state.count_matrix, clusters) if state.count_matrix is not None else None
    records: List[MetricsRecord] = []
    steps = range(state.step, end)
    if progress:
        steps = tqdm(steps, desc=f"pretrain {objective.objective.value}", initial=state.step, total=end)

    def emit(record: MetricsRecord) -> None:
        records.append(record)
        if metrics_file is not None:
            metrics_file.write(record.model_dump_json() + "\n")
            metrics_file.flush()

    try:
        for step in steps:
            started = time.perf_counter()
            batch = source.at(step)
            rng = batch_rng(cfg.seed, step)
            dropout_rng = None
            if model_config.dropout > 0:
                dropout_rng = np.random.default_rng([cfg.seed, _DROPOUT_STREAM, step])
            generator = (state.generator_params, generator_config) if generator_config is not None else None

            cb = corrupt(batch, vocab, objective, rng, crts_state=sampler, generator=generator)
            logits, cache = forward(state.params, model_config, cb, rng=dropout_rng)
            step_loss = loss(cb, logits)
            if not np.isfinite(step_loss):
                raise TrainingError(f"non-finite loss at step {step}")
            grads = backward(state.params, cache, cb)

            groups = [grads]
            gen_loss = None
            if generator is not None:
                gen_logits, gen_cache = forward(state.generator_params, generator_config, cb.generator_batch)
                gen_loss = loss(cb.generator_batch, gen_logits)
                gen_grads = backward(state.generator_params, gen_cache, cb.generator_batch)
                groups = [{name: g * cfg.disc_weight for name, g in grads.items()}, gen_grads]
            groups, _ = clip_by_global_norm(groups, cfg.grad_clip)

            lr = lr_at(step, cfg)
            params, moments = adam_step(state.params, groups[0], state.moments, step + 1, cfg, lr)
            state = TrainState(
                params=params,
                moments=moments,
                step=step + 1,
                count_matrix=state.count_matrix,
                generator_params=state.generator_params,
                generator_moments=state.generator_moments,
            )
            if generator is not None:
                state.generator_params, state.generator_moments = adam_step(
                    generator[0], groups[1], state.generator_moments, step + 1, cfg, lr
                )

            if sampler is not None:
                # feedback lands after the optimizer step, between batches
                state.count_matrix = update_counts(state.count_matrix, outcome_delta(cb, logits))
                sampler = ReplacementSampler(state.count_matrix, clusters)

            if state.step % cfg.log_every == 0 or state.step == cfg.total_steps:
                record = MetricsRecord(
                    step=state.step, loss=step_loss, lr=lr, generator_loss=gen_loss,
                    replaced_positions=int(np.asarray(cb.corruption_mask, dtype=bool).sum()),
                    wall_ms=0.0 if cfg.reference else (time.perf_counter() - started) * 1000.0,
                )
                if model_config.head_type == HeadType.BINARY:
                    mask = np.asarray(cb.loss_mask, dtype=bool)
                    record.discriminator_accuracy = balanced_accuracy(predict_binary(logits)[mask], cb.labels[mask] == 1)
                else:
                    ce, hits, count = _replaced_stats(cb, logits)
                    if count:
                        record.replaced_ce = ce / count
                        record.replaced_accuracy = hits / count
                emit(record)
                logger.info("step %d loss %.4f lr %.3g", state.step, step_loss, lr)

            if cfg.eval_every and state.step % cfg.eval_every == 0:
                _, heldout = source.split(max_len_at(step, cfg, model_config.max_len))
                gen = (state.generator_params, generator_config) if generator_config is not None else None
                result = evaluate(
                    state.params, model_config, heldout[: cfg.eval_batches], vocab, objective,
                    cfg.seed, crts_state=sampler, generator=gen,
                )
                emit(MetricsRecord(
                    step=state.step, split="eval", loss=result.loss,
                    discriminator_accuracy=result.discriminator_accuracy,
                    replaced_accuracy=result.replaced_accuracy, replaced_ce=result.replaced_ce,
                ))

            if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint-{state.step}.pkl", state, model_config, cfg, generator_config)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = save_checkpoint(out_dir / "checkpoint.pkl", state, model_config, cfg, generator_config)

    _, heldout = source.split(max_len_at(max(end - 1, 0), cfg, model_config.max_len))
    return PretrainResult(state=state, metrics=records, heldout=heldout, checkpoint_path=checkpoint_path)


def probe_hardness(
    params: Params,
    config: ModelConfig,
    crts_state: ReplacementSampler,
    batches: Sequence[Batch],
    vocab: Vocab,
    seed: int = 0,
    replace_rate: float = 0.15,
) -> HardnessReport:
    """Discriminator accuracy at replaced positions: uniform vs cluster-history replacements.

    Both variants corrupt exactly the same positions of every batch.
    """
    if config.head_type != HeadType.BINARY:
        raise HeadMismatchError("probe_hardness needs a binary-head checkpoint")
    caught = {"uniform": 0, "crts": 0}
    positions = 0
    for index, batch in enumerate(batches):
        selected = select_batch(batch, replace_rate, np.random.default_rng([seed, _PROBE_STREAM, index]))
        variants = {
            "uniform": replace_at(batch, selected, vocab, np.random.default_rng([seed, _PROBE_STREAM, index, 1])),
            "crts": replace_at(
                batch, selected, vocab, np.random.default_rng([seed, _PROBE_STREAM, index, 2]), sampler=crts_state
            ),
        }
        for name, cb in variants.items():
            logits, _ = forward(params, config, cb)
            caught[name] += int(predict_binary(logits)[cb.corruption_mask].sum())
        positions += int(selected.sum())
    if positions == 0:
        raise TrainingError("no replaceable positions in the probe batches")
    return HardnessReport(acc_uniform=caught["uniform"] / positions, acc_crts=caught["crts"] / positions, positions=positions)
