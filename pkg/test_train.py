import numpy as np
import pytest
from pydantic import ValidationError

from pretraining.crts import CountMatrix, ReplacementSampler
from pretraining.errors import HeadMismatchError, MissingDependencyError, TrainingError
from pretraining.model import HeadType, init_params
from pretraining.objectives import CorruptedBatch, Objective, ObjectiveConfig
from pretraining.train import (
    GENERATOR_STEP_RATIO,
    AdamMoments,
    MetricsRecord,
    TrainConfig,
    adam_step,
    balanced_accuracy,
    clip_by_global_norm,
    decays,
    derive_total_steps,
    evaluate,
    generator_config_for,
    load_checkpoint,
    lr_at,
    max_len_at,
    outcome_delta,
    pretrain,
    probe_hardness,
    split_batches,
)

def run_config(objective=Objective.RTS, total_steps=6, **overrides):
    values = dict(peak_lr=1e-3, warmup_steps=2, base_steps=total_steps, total_steps=total_steps, batch_size=8,
                  objective=ObjectiveConfig(objective=objective), log_every=1)
    values.update(overrides)
    return TrainConfig(**values)

def test_learning_rate_schedule():
    cfg = TrainConfig(peak_lr=1e-4, warmup_steps=100, base_steps=1000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 1e-4
    assert lr_at(1000, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(550, cfg) == pytest.approx(5e-5, rel=1e-12)
    with pytest.raises(TrainingError):
        lr_at(1001, cfg)
    with pytest.raises(TrainingError):
        lr_at(-1, cfg)

def test_base_schedule_peaks_at_its_published_rate():
    cfg = TrainConfig.base(ObjectiveConfig(objective=Objective.RTS))
    assert cfg.total_steps == 900_000
    assert lr_at(10_000, cfg) == 1e-4
    assert lr_at(900_000, cfg) == 0.0

def test_generator_objectives_train_for_fewer_steps():
    td = ObjectiveConfig(objective=Objective.TD_GEN)
    assert derive_total_steps(900_000, td) == 766_000
    assert derive_total_steps(900_000, ObjectiveConfig()) == 900_000
    assert TrainConfig(base_steps=900, warmup_steps=10, objective=td).total_steps == 766
    assert GENERATOR_STEP_RATIO == pytest.approx(766 / 900)

def test_warmup_must_end_before_training_does():
    with pytest.raises(ValidationError):
        TrainConfig(warmup_steps=100, base_steps=100)

def test_first_adam_step_moves_by_the_learning_rate():
    cfg = TrainConfig()
    params = {"x.bias": np.array([0.5])}
    new, moments = adam_step(params, {"x.bias": np.array([1.0])}, AdamMoments.zeros(params), 1, cfg, lr=1e-3)
    assert new["x.bias"][0] == pytest.approx(0.5 - 1e-3, abs=1e-10)
    assert moments.m["x.bias"][0] == pytest.approx(0.1)
    assert moments.v["x.bias"][0] == pytest.approx(0.001)

def test_weight_decay_touches_matrices_only():
    cfg = TrainConfig(weight_decay=0.01)
    params = {"w.weight": np.array([1.0]), "w.bias": np.array([1.0]), "ln.gain": np.array([1.0])}
    zeros = {name: np.zeros(1) for name in params}
    new, _ = adam_step(params, zeros, AdamMoments.zeros(params), 1, cfg, lr=0.1)
    assert new["w.weight"][0] == pytest.approx(1.0 - 0.1 * 0.01)
    assert new["w.bias"][0] == 1.0
    assert new["ln.gain"][0] == 1.0
    assert decays("layers.0.attn.q.weight")
    assert not decays("layers.0.ln1.gain")

def test_adam_rejects_non_finite_gradients():
    params = {"w.weight": np.array([1.0])}
    with pytest.raises(TrainingError):
        adam_step(params, {"w.weight": np.array([np.nan])}, AdamMoments.zeros(params), 1, TrainConfig(), lr=0.1)

def test_global_norm_clipping_spans_every_group():
    groups, norm = clip_by_global_norm([{"a": np.array([3.0])}, {"b": np.array([4.0])}], 1.0)
    assert norm == 5.0
    assert groups[0]["a"][0] == pytest.approx(0.6)
    assert groups[1]["b"][0] == pytest.approx(0.8)
    same, _ = clip_by_global_norm([{"a": np.array([0.3])}], 1.0)
    assert same[0]["a"][0] == 0.3

def test_balanced_accuracy():
    truth = np.array([True, False, False, False])
    assert balanced_accuracy(np.array([True, False, False, False]), truth) == 1.0
    assert balanced_accuracy(np.zeros(4, bool), truth) == 0.5
    assert balanced_accuracy(np.array([True, True, False, False]), truth) == pytest.approx((1.0 + 2 / 3) / 2)

def test_sequence_length_schedule():
    cfg = TrainConfig(base_steps=10, warmup_steps=1, seq_len_schedule=[(8, 16), (2, 32)])
    assert [max_len_at(s, cfg, 64) for s in (0, 7, 8, 9, 12)] == [16, 16, 32, 32, 32]
    assert max_len_at(3, TrainConfig(base_steps=10, warmup_steps=1), 64) == 64

def test_generator_is_a_quarter_width_lm(tiny_config):
    wide = tiny_config.model_copy(update={"hidden": 64, "heads": 4, "intermediate": 256})
    gen = generator_config_for(wide)
    assert (gen.hidden, gen.heads, gen.intermediate) == (16, 1, 64)
    assert gen.layers == wide.layers
    assert gen.head_type == HeadType.LM

def test_outcome_delta_signs():
    source = np.array([[-1, 0, 1, -1]])
    target = np.array([[-1, 2, 1, -1]])
    corrupted = np.array([[False, True, True, False]])
    cb = CorruptedBatch(
        input_ids=np.zeros((1, 4), dtype=np.int64), original_ids=np.zeros((1, 4), dtype=np.int64),
        corruption_mask=corrupted, labels=corrupted.astype(int), loss_mask=np.ones((1, 4), bool),
        attention_mask=np.ones((1, 4), bool), objective_tag=Objective.CRTS,
        source_clusters=source, target_clusters=target,
    )
    # caught at position 1, missed at position 2
    logits = np.array([[[-5.0], [5.0], [-5.0], [5.0]]])
    delta = outcome_delta(cb, logits)
    assert delta.counts == {(0, 2): -1, (1, 1): 1}
    assert delta.num_events == 2

def test_split_batches_holds_out_the_tail(encoded):
    cfg = run_config(batch_size=4)
    train, heldout = split_batches(encoded, 16, cfg)
    assert len(heldout) >= 1
    assert len(train) + len(heldout) == -(-sum(-(-len(s) // 14) for s in encoded) // 4)
    with pytest.raises(TrainingError):
        split_batches(encoded[:2], 16, run_config(batch_size=32))

def test_pretrain_writes_metrics_and_checkpoint(tmp_path, encoded, vocab, tiny_config):
    result = pretrain(encoded, vocab, tiny_config, run_config(), out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    records = [MetricsRecord.model_validate_json(line) for line in lines]
    assert [r.step for r in records] == [1, 2, 3, 4, 5, 6]
    assert all(np.isfinite(r.loss) for r in records)
    assert records[0].lr == 0.0
    assert all(r.wall_ms == 0.0 for r in records)
    state, model_config, train_config, _ = load_checkpoint(result.checkpoint_path)
    assert state.step == 6
    assert model_config == tiny_config
    assert all(np.array_equal(state.params[k], result.state.params[k]) for k in state.params)

def test_identical_runs_are_bit_identical(encoded, vocab, tiny_config):
    a = pretrain(encoded, vocab, tiny_config, run_config())
    b = pretrain(encoded, vocab, tiny_config, run_config())
    assert [r.model_dump() for r in a.metrics] == [r.model_dump() for r in b.metrics]
    assert all(np.array_equal(a.state.params[k], b.state.params[k]) for k in a.state.params)

def test_resume_matches_an_uninterrupted_run(tmp_path, encoded, vocab, tiny_config, vocab_clusters):
    cfg = run_config(Objective.CRTS)
    full = pretrain(encoded, vocab, tiny_config, cfg, clusters=vocab_clusters)

    first = pretrain(encoded, vocab, tiny_config, cfg, clusters=vocab_clusters, out_dir=tmp_path / "a", stop_after=3)
    assert first.state.step == 3
    rest = pretrain(encoded, vocab, tiny_config, cfg, clusters=vocab_clusters, out_dir=tmp_path / "b",
                    resume_from=first.checkpoint_path)

    assert rest.state.step == full.state.step == 6
    assert all(np.array_equal(rest.state.params[k], full.state.params[k]) for k in full.state.params)
    assert all(np.array_equal(rest.state.moments.v[k], full.state.moments.v[k]) for k in full.state.params)
    assert np.array_equal(rest.state.count_matrix.F, full.state.count_matrix.F)
    assert [r.model_dump() for r in first.metrics + rest.metrics] == [r.model_dump() for r in full.metrics]

def test_stopping_between_log_steps_writes_no_extra_record(tmp_path, encoded, vocab, tiny_config):
    cfg = run_config(log_every=2)
    full = pretrain(encoded, vocab, tiny_config, cfg)
    first = pretrain(encoded, vocab, tiny_config, cfg, out_dir=tmp_path, stop_after=3)
    rest = pretrain(encoded, vocab, tiny_config, cfg, out_dir=tmp_path, resume_from=first.checkpoint_path)

    assert [r.step for r in full.metrics] == [2, 4, 6]
    assert [r.step for r in first.metrics] == [2]
    assert [r.model_dump() for r in first.metrics + rest.metrics] == [r.model_dump() for r in full.metrics]
    lines = (tmp_path / "metrics.jsonl").read_text(encoding="utf-8").splitlines()
    assert [MetricsRecord.model_validate_json(line).step for line in lines] == [2, 4, 6]

def test_count_matrix_moves_by_at_most_the_replaced_positions(encoded, vocab, tiny_config, vocab_clusters):
    cfg = run_config(Objective.CRTS, total_steps=4)
    full = pretrain(encoded, vocab, tiny_config, cfg, clusters=vocab_clusters)
    replaced = [r.replaced_positions for r in full.metrics]
    assert len(replaced) == 4 and all(n > 0 for n in replaced)

    previous = np.zeros((3, 3), dtype=np.int64)
    for k in range(1, 5):
        F = pretrain(encoded, vocab, tiny_config, cfg, clusters=vocab_clusters, stop_after=k).state.count_matrix.F
        delta = F - previous
        moved = int(np.abs(delta).sum())
        # each replaced position adds or removes exactly one count
        assert moved <= replaced[k - 1]
        assert (replaced[k - 1] - moved) % 2 == 0
        assert abs(int(delta.sum())) <= replaced[k - 1]
        previous = F
    assert np.array_equal(previous, full.state.count_matrix.F)

def test_count_matrix_collects_feedback(encoded, vocab, tiny_config, vocab_clusters):
    result = pretrain(encoded, vocab, tiny_config, run_config(Objective.CRTS), clusters=vocab_clusters)
    F = result.state.count_matrix.F
    assert F.shape == (3, 3)
    assert np.abs(F).sum() > 0

def test_resume_refuses_a_different_configuration(tmp_path, encoded, vocab, tiny_config):
    first = pretrain(encoded, vocab, tiny_config, run_config(), out_dir=tmp_path, stop_after=2)
    with pytest.raises(TrainingError):
        pretrain(encoded, vocab, tiny_config, run_config(peak_lr=5e-4), resume_from=first.checkpoint_path)

def test_pretrain_checks_its_dependencies(encoded, vocab, tiny_config):
    with pytest.raises(MissingDependencyError):
        pretrain(encoded, vocab, tiny_config, run_config(Objective.CRTS))
    with pytest.raises(HeadMismatchError):
        pretrain(encoded, vocab, tiny_config, run_config(Objective.SLM))

def test_lm_objectives_report_replaced_position_metrics(encoded, vocab, tiny_config):
    lm = tiny_config.model_copy(update={"head_type": HeadType.LM})
    result = pretrain(encoded, vocab, lm, run_config(Objective.SLM, eval_every=3, eval_batches=2))
    train = [r for r in result.metrics if r.split == "train"]
    evals = [r for r in result.metrics if r.split == "eval"]
    assert all(r.replaced_ce is not None for r in train)
    assert [r.step for r in evals] == [3, 6]
    assert all(0.0 <= r.replaced_accuracy <= 1.0 for r in evals)

def test_generator_objective_trains_both_networks(encoded, vocab, tiny_config):
    result = pretrain(encoded, vocab, tiny_config, run_config(Objective.TD_GEN, total_steps=4, warmup_steps=1))
    assert result.state.generator_params is not None
    assert all(r.generator_loss is not None for r in result.metrics)
    start = init_params(generator_config_for(tiny_config), seed=1)
    assert not np.array_equal(start["head.lm.bias"], result.state.generator_params["head.lm.bias"])

def test_evaluate_scores_held_out_batches(encoded, vocab, tiny_config):
    cfg = run_config()
    result = pretrain(encoded, vocab, tiny_config, cfg)
    scored = evaluate(result.state.params, tiny_config, result.heldout, vocab, cfg.objective, seed=0)
    again = evaluate(result.state.params, tiny_config, result.heldout, vocab, cfg.objective, seed=0)
    assert scored == again
    assert 0.0 <= scored.discriminator_accuracy <= 1.0
    assert scored.positions > 0

def test_probe_uses_the_same_positions_for_both_variants(encoded, vocab, tiny_config, vocab_clusters):
    params = init_params(tiny_config)
    _, heldout = split_batches(encoded, 16, run_config())
    sampler = ReplacementSampler(CountMatrix.zeros(3), vocab_clusters)
    report = probe_hardness(params, tiny_config, sampler, heldout, vocab)
    assert report.positions > 0
    assert 0.0 <= report.acc_uniform <= 1.0 and 0.0 <= report.acc_crts <= 1.0
    with pytest.raises(HeadMismatchError):
        probe_hardness(params, tiny_config.model_copy(update={"head_type": HeadType.LM}), sampler, heldout, vocab)

@pytest.mark.slow
def test_untrained_discriminator_sits_at_chance(encoded, vocab, tiny_config, vocab_clusters):
    train, heldout = split_batches(encoded, 16, run_config())
    sampler = ReplacementSampler(CountMatrix.zeros(3), vocab_clusters)
    caught_uniform = caught_crts = positions = 0
    # pooled over initialisations
    for seed in range(40):
        report = probe_hardness(init_params(tiny_config, seed), tiny_config, sampler, train + heldout, vocab, seed=seed)
        caught_uniform += report.acc_uniform * report.positions
        caught_crts += report.acc_crts * report.positions
        positions += report.positions
    assert positions >= 10_000
    assert caught_uniform / positions == pytest.approx(0.5, abs=0.05)
    assert caught_crts / positions == pytest.approx(0.5, abs=0.05)
