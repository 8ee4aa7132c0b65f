"""Cluster-count x gamma grid for history-based replacements.

Each cell clusters the embeddings, pre-trains a C-RTS discriminator and
measures how often it catches uniform versus history replacements.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from pretraining.cluster import kmeans, save_clusters
from pretraining.corpus import TokenSequence, Vocab
from pretraining.crts import ReplacementSampler
from pretraining.embed import EmbeddingTable
from pretraining.errors import ConfigError, HeadMismatchError
from pretraining.model import HeadType, ModelConfig
from pretraining.objectives import Objective
from pretraining.train import TrainConfig, pretrain, probe_hardness

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["clusters", "gamma", "loss", "acc_uniform", "acc_crts", "gap"]


def sweep_crts(
    corpus: Sequence[TokenSequence],
    vocab: Vocab,
    table: EmbeddingTable,
    model_config: ModelConfig,
    train_config: TrainConfig,
    cluster_grid: Sequence[int],
    gamma_grid: Sequence[float],
    heldout_batches: int = 20,
    max_iter: int = 100,
    out_dir=None,
    progress: bool = False,
) -> pd.DataFrame:
    """One row per (clusters, gamma) cell.

    gap is acc_uniform - acc_crts; a positive gap means the history
    replacements were harder to catch.
    """
    if model_config.head_type != HeadType.BINARY:
        raise HeadMismatchError("the sweep trains binary-head discriminators")
    if train_config.objective.objective != Objective.CRTS:
        raise ConfigError("the sweep runs the crts objective")
    if not cluster_grid or not gamma_grid:
        raise ConfigError("sweep grids must not be empty")
    if heldout_batches < 1:
        raise ConfigError("heldout_batches must be at least 1")
    corpus = list(corpus)
    out_dir = Path(out_dir) if out_dir is not None else None

    rows = []
    for n in cluster_grid:
        clusters = kmeans(table, vocab, n, max_iter=max_iter, seed=train_config.seed)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_clusters(clusters, out_dir / f"clusters-{n}.txt")
        for gamma in gamma_grid:
            objective = train_config.objective.model_copy(update={"crts_gamma": float(gamma), "crts_clusters": n})
            cfg = train_config.model_copy(update={"objective": objective})
            cell_dir = out_dir / f"n{n}-gamma{gamma:g}" if out_dir is not None else None
            result = pretrain(corpus, vocab, model_config, cfg, clusters=clusters, out_dir=cell_dir, progress=progress)

            batches = [result.heldout[i % len(result.heldout)] for i in range(heldout_batches)]
            hardness = probe_hardness(
                result.state.params, model_config, ReplacementSampler(result.state.count_matrix, clusters),
                batches, vocab, seed=cfg.seed, replace_rate=objective.replace_rate,
            )
            train_records = [r for r in result.metrics if r.split == "train"]
            rows.append({
                "clusters": n,
                "gamma": float(gamma),
                "loss": train_records[-1].loss if train_records else float("nan"),
                "acc_uniform": hardness.acc_uniform,
                "acc_crts": hardness.acc_crts,
            })
            logger.info("sweep n=%d gamma=%g: uniform %.4f crts %.4f", n, gamma, hardness.acc_uniform, hardness.acc_crts)

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS[:-1])
    frame["gap"] = frame["acc_uniform"] - frame["acc_crts"]
    return frame


def format_sweep(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, float_format="{:.4f}".format)


def sweep_jsonl(frame: pd.DataFrame) -> str:
    return frame.to_json(orient="records", lines=True)


def best_cell(frame: pd.DataFrame) -> Optional[pd.Series]:
    """Cell whose history replacements were hardest to catch; ties go to the earlier cell."""
    if frame.empty:
        return None
    return frame.loc[frame["gap"].idxmax()]
