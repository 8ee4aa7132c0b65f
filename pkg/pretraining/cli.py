"""Command-line front door: one subcommand per pipeline stage."""

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Type

from pydantic import BaseModel, ValidationError

import config as env_config
from pretraining import __version__
from pretraining.cluster import kmeans, load_clusters, save_clusters
from pretraining.corpus import build_vocab, encode, generate_corpus, iter_corpus, load_vocab, save_vocab
from pretraining.crts import ReplacementSampler, initial_state, load_count_matrix, save_count_matrix
from pretraining.embed import load_embeddings, save_embeddings, train_sgns
from pretraining.errors import ConfigError, MissingDependencyError, MissingInputError, PretrainingError
from pretraining.flops import desk_entries, format_report, base_entries, report, report_jsonl
from pretraining.model import HeadType, ModelConfig
from pretraining.objectives import Objective, ObjectiveConfig
from pretraining.settings import (
    BuildVocabSettings,
    ClusterSettings,
    CommonSettings,
    FlopsSettings,
    GenCorpusSettings,
    PretrainSettings,
    ProbeSettings,
    SweepSettings,
    TrainEmbeddingsSettings,
    parse_grid,
    parse_schedule,
    resolve,
)
from pretraining.sweep import best_cell, format_sweep, sweep_crts, sweep_jsonl
from pretraining.train import TrainConfig, load_checkpoint, pretrain, probe_hardness, split_batches

logger = logging.getLogger(__name__)


class RunManifest(BaseModel):
    command: str
    version: str
    created: str
    seed: int
    reference: bool
    settings: Dict[str, Any]
    inputs: Dict[str, str]
    artifacts: Dict[str, str]


def file_sha256(path) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def make_run_dir(out, seed: int) -> Path:
    base = Path(out) / f"{datetime.now().strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    run_dir, suffix = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


def _encoded(corpus_path, vocab) -> List:
    return [encode(vocab, line) for line in iter_corpus(corpus_path)]


def cmd_gen_corpus(s: GenCorpusSettings, run_dir: Path) -> Dict[str, Path]:
    lines = generate_corpus(
        num_docs=s.docs, num_words=s.words, num_topics=s.topics, seed=s.seed,
        min_doc_len=s.min_doc_len, max_doc_len=s.max_doc_len,
    )
    path = run_dir / "corpus.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"📚 Wrote {len(lines)} documents to {path}")
    return {"corpus": path}


def cmd_build_vocab(s: BuildVocabSettings, run_dir: Path) -> Dict[str, Path]:
    vocab = build_vocab(iter_corpus(s.corpus), s.max_size, s.min_freq)
    path = run_dir / "vocab.txt"
    save_vocab(vocab, path)
    print(f"📖 Vocab of {vocab.size} tokens written to {path}")
    return {"vocab": path}


def cmd_train_embeddings(s: TrainEmbeddingsSettings, run_dir: Path) -> Dict[str, Path]:
    vocab = load_vocab(s.vocab)
    table = train_sgns(
        _encoded(s.corpus, vocab), vocab, dim=s.dim, window=s.window, negatives=s.negatives,
        epochs=s.epochs, lr=s.lr, seed=s.seed, batch_pairs=s.batch_pairs,
    )
    path = run_dir / "embeddings.txt"
    save_embeddings(table, path)
    if table.loss_history:
        print(f"🧠 SGNS final loss {table.loss_history[-1]:.4f}")
    print(f"💾 Embeddings ({table.size} x {table.dim}) written to {path}")
    return {"embeddings": path}


def cmd_cluster(s: ClusterSettings, run_dir: Path) -> Dict[str, Path]:
    model = kmeans(load_embeddings(s.embeddings), load_vocab(s.vocab), s.clusters, max_iter=s.max_iter, seed=s.seed)
    path = run_dir / "clusters.txt"
    save_clusters(model, path)
    print(f"🗂️  {model.n} clusters (sse {model.sse:.4f}) written to {path}")
    return {"clusters": path}


def _pretrain_configs(s: PretrainSettings, vocab_size: int):
    objective = ObjectiveConfig(
        objective=s.objective, replace_rate=s.replace_rate, mlm_mask_frac=s.mlm_mask_frac,
        mlm_random_frac=s.mlm_random_frac, seed=s.seed, replacement=s.replacement,
        crts_gamma=s.gamma, temperature=s.temperature,
    )
    model_config = ModelConfig(
        layers=s.layers, hidden=s.hidden, heads=s.heads, intermediate=s.intermediate, max_len=s.max_len,
        vocab_size=vocab_size, head_type=HeadType.BINARY if objective.binary_head else HeadType.LM,
        dropout=s.dropout, dtype="float64" if s.reference else "float32",
    )
    train_config = TrainConfig(
        peak_lr=s.peak_lr, warmup_steps=s.warmup, base_steps=s.steps, total_steps=s.total_steps,
        batch_size=s.batch_size, weight_decay=s.weight_decay, grad_clip=s.grad_clip, seed=s.seed,
        objective=objective, seq_len_schedule=parse_schedule(s.seq_len_schedule), log_every=s.log_every,
        eval_every=s.eval_every, checkpoint_every=s.checkpoint_every, disc_weight=s.disc_weight,
        reference=s.reference,
    )
    return objective, model_config, train_config


def cmd_pretrain(s: PretrainSettings, run_dir: Path) -> Dict[str, Path]:
    vocab = load_vocab(s.vocab)
    objective, model_config, train_config = _pretrain_configs(s, vocab.size)
    clusters = load_clusters(s.cluster_file) if s.cluster_file is not None else None
    result = pretrain(
        _encoded(s.corpus, vocab), vocab, model_config, train_config, clusters=clusters,
        out_dir=run_dir, resume_from=s.resume, progress=True,
    )
    artifacts = {"checkpoint": result.checkpoint_path, "metrics": run_dir / "metrics.jsonl"}
    if result.state.count_matrix is not None:
        artifacts["count_matrix"] = run_dir / "count_matrix.txt"
        save_count_matrix(result.state.count_matrix, artifacts["count_matrix"])
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"📈 step {last.step}: loss {last.loss:.4f}")
    print(f"💾 Checkpoint written to {result.checkpoint_path}")
    return artifacts


def cmd_probe(s: ProbeSettings, run_dir: Path) -> Dict[str, Path]:
    state, model_config, train_config, _ = load_checkpoint(s.checkpoint)
    vocab = load_vocab(s.vocab)
    clusters = load_clusters(s.cluster_file)
    if s.count_matrix is not None:
        cm = load_count_matrix(s.count_matrix)
    elif state.count_matrix is not None:
        cm = state.count_matrix
    else:
        cm = initial_state(clusters, train_config.objective.crts_gamma)
    _, heldout = split_batches(_encoded(s.corpus, vocab), model_config.max_len, train_config)
    batches = [heldout[i % len(heldout)] for i in range(s.batches)]
    result = probe_hardness(
        state.params, model_config, ReplacementSampler(cm, clusters), batches, vocab,
        seed=s.seed, replace_rate=train_config.objective.replace_rate,
    )
    path = run_dir / "probe.json"
    path.write_text(json.dumps(asdict(result), indent=2) + "\n", encoding="utf-8")
    print(f"🔬 acc_uniform {result.acc_uniform:.4f}  acc_crts {result.acc_crts:.4f}  ({result.positions} positions)")
    return {"probe": path}


def cmd_sweep(s: SweepSettings, run_dir: Path) -> Dict[str, Path]:
    vocab = load_vocab(s.vocab)
    _, model_config, train_config = _pretrain_configs(s, vocab.size)
    frame = sweep_crts(
        _encoded(s.corpus, vocab), vocab, load_embeddings(s.embeddings), model_config, train_config,
        parse_grid(s.cluster_grid, int), parse_grid(s.gamma_grid, float), heldout_batches=s.heldout_batches,
        max_iter=s.max_iter, out_dir=run_dir, progress=True,
    )
    table = run_dir / "sweep.txt"
    lines = run_dir / "sweep.jsonl"
    table.write_text(format_sweep(frame) + "\n", encoding="utf-8")
    lines.write_text(sweep_jsonl(frame), encoding="utf-8")
    print(format_sweep(frame))
    best = best_cell(frame)
    if best is not None:
        print(f"🏆 hardest replacements at {int(best['clusters'])} clusters, gamma {best['gamma']:g}")
    return {"report": table, "report_jsonl": lines}


def cmd_flops(s: FlopsSettings, run_dir: Path) -> Dict[str, Path]:
    if s.preset == "base":
        entries = base_entries(s.generator_head)
    else:
        config = ModelConfig(
            layers=s.layers, hidden=s.hidden, heads=s.heads, intermediate=s.intermediate,
            max_len=s.max_len, vocab_size=s.vocab_size,
        )
        entries = desk_entries(config, [(s.steps, s.max_len)], s.batch_size)
    frame = report(entries)
    table = run_dir / "flops.txt"
    lines = run_dir / "flops.jsonl"
    table.write_text(format_report(frame) + "\n", encoding="utf-8")
    lines.write_text(report_jsonl(frame), encoding="utf-8")
    print(format_report(frame))
    return {"report": table, "report_jsonl": lines}


@dataclass
class Command:
    settings_cls: Type[CommonSettings]
    run: Callable[[Any, Path], Dict[str, Path]]
    inputs: Callable[[Any], Dict[str, Optional[Path]]]
    help: str


def _pretrain_inputs(s: PretrainSettings) -> Dict[str, Optional[Path]]:
    objective = ObjectiveConfig(objective=s.objective, replacement=s.replacement)
    if objective.needs_clusters and s.cluster_file is None:
        raise MissingDependencyError(f"objective {s.objective.value} needs --cluster-file")
    return {"corpus": s.corpus, "vocab": s.vocab, "cluster_file": s.cluster_file, "resume": s.resume}


def _probe_inputs(s: ProbeSettings) -> Dict[str, Optional[Path]]:
    if s.cluster_file is None:
        raise MissingDependencyError("probe needs --cluster-file")
    return {"checkpoint": s.checkpoint, "corpus": s.corpus, "vocab": s.vocab,
            "cluster_file": s.cluster_file, "count_matrix": s.count_matrix}


def _sweep_inputs(s: SweepSettings) -> Dict[str, Optional[Path]]:
    if s.objective != Objective.CRTS:
        raise ConfigError("sweep runs the crts objective only")
    if s.cluster_file is not None or s.resume is not None:
        raise ConfigError("sweep clusters its own embeddings and cannot resume")
    parse_grid(s.cluster_grid, int)
    parse_grid(s.gamma_grid, float)
    return {"corpus": s.corpus, "vocab": s.vocab, "embeddings": s.embeddings}


COMMANDS: Dict[str, Command] = {
    "gen-corpus": Command(GenCorpusSettings, cmd_gen_corpus, lambda s: {}, "write the bundled synthetic corpus"),
    "build-vocab": Command(BuildVocabSettings, cmd_build_vocab, lambda s: {"corpus": s.corpus}, "build a vocab file"),
    "train-embeddings": Command(
        TrainEmbeddingsSettings, cmd_train_embeddings, lambda s: {"corpus": s.corpus, "vocab": s.vocab},
        "train skip-gram embeddings",
    ),
    "cluster": Command(
        ClusterSettings, cmd_cluster, lambda s: {"embeddings": s.embeddings, "vocab": s.vocab},
        "k-means the vocabulary",
    ),
    "pretrain": Command(PretrainSettings, cmd_pretrain, _pretrain_inputs, "run a pre-training objective"),
    "probe": Command(ProbeSettings, cmd_probe, _probe_inputs, "compare uniform and history replacements"),
    "sweep": Command(SweepSettings, cmd_sweep, _sweep_inputs, "grid over cluster counts and gamma"),
    "flops": Command(FlopsSettings, cmd_flops, lambda s: {}, "estimate training FLOPs"),
}

# Flags of every subcommand besides the common ones, with their argparse types
_FLAGS: Dict[str, Dict[str, type]] = {
    "gen-corpus": {"docs": int, "words": int, "topics": int, "min_doc_len": int, "max_doc_len": int},
    "build-vocab": {"corpus": str, "max_size": int, "min_freq": int},
    "train-embeddings": {"corpus": str, "vocab": str, "dim": int, "window": int, "negatives": int,
                         "epochs": int, "lr": float, "batch_pairs": int},
    "cluster": {"embeddings": str, "vocab": str, "clusters": int, "max_iter": int},
    "pretrain": {"corpus": str, "vocab": str, "objective": str, "replacement": str, "cluster_file": str,
                 "gamma": float, "replace_rate": float, "mlm_mask_frac": float, "mlm_random_frac": float,
                 "temperature": float, "layers": int, "hidden": int, "heads": int, "intermediate": int,
                 "max_len": int, "dropout": float, "steps": int, "total_steps": int, "warmup": int,
                 "batch_size": int, "peak_lr": float, "weight_decay": float, "grad_clip": float,
                 "disc_weight": float, "seq_len_schedule": str, "log_every": int, "eval_every": int,
                 "checkpoint_every": int, "resume": str},
    "probe": {"checkpoint": str, "corpus": str, "vocab": str, "cluster_file": str, "count_matrix": str,
              "batches": int},
    "sweep": {"corpus": str, "vocab": str, "embeddings": str, "cluster_grid": str, "gamma_grid": str,
              "heldout_batches": int, "max_iter": int, "replace_rate": float, "layers": int, "hidden": int,
              "heads": int, "intermediate": int, "max_len": int, "steps": int, "warmup": int, "batch_size": int,
              "peak_lr": float, "log_every": int, "eval_every": int},
    "flops": {"preset": str, "generator_head": str, "layers": int, "hidden": int, "heads": int,
              "intermediate": int, "max_len": int, "vocab_size": int, "steps": int, "batch_size": int},
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="directory the run directory is created in")
    common.add_argument("--threads", type=int, help="BLAS threads for the fast path")
    common.add_argument("--reference", action=argparse.BooleanOptionalAction, default=None,
                        help="64-bit deterministic path (default) or the 32-bit fast path")

    parser = argparse.ArgumentParser(prog="pretrain-toolkit", description="Efficient pre-training objectives toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, command in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=command.help)
        for flag, kind in _FLAGS[name].items():
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=kind)
    return parser


def _check_inputs(inputs: Dict[str, Optional[Path]]) -> Dict[str, str]:
    hashes = {}
    for name, path in inputs.items():
        if path is None:
            continue
        if not Path(path).exists():
            raise MissingInputError(f"{name} file not found: {path}")
        hashes[str(path)] = file_sha256(path)
    return hashes


def run_command(name: str, flags: Dict[str, Any], config_path=None) -> Path:
    """Resolve settings, validate inputs, write the manifest, then compute. Returns the run dir."""
    command = COMMANDS[name]
    settings = resolve(command.settings_cls, flags, config_path)
    hashes = _check_inputs(command.inputs(settings))

    run_dir = make_run_dir(settings.out, settings.seed)
    manifest = RunManifest(
        command=name,
        version=__version__,
        created=datetime.now().isoformat(timespec="seconds"),
        seed=settings.seed,
        reference=settings.reference,
        settings=settings.model_dump(mode="json"),
        inputs=hashes,
        artifacts={},
    )
    (run_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")

    artifacts = command.run(settings, run_dir)
    manifest.artifacts = {key: str(path) for key, path in artifacts.items() if path is not None}
    (run_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return run_dir


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(env_config.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    flags = {key: value for key, value in vars(args).items() if key not in ("command", "config")}
    try:
        run_dir = run_command(args.command, flags, args.config)
    except PretrainingError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"❌ invalid configuration: {e.errors()[0]['msg']}", file=sys.stderr)
        return ConfigError.exit_code
    except Exception as e:
        print(f"❌ unexpected error: {e}", file=sys.stderr)
        return 1
    print(f"✅ {args.command} finished: {run_dir}")
    return 0
