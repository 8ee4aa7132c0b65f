from dataclasses import replace

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import expit

from conftest import make_batch
from pretraining.corpus import NUM_SPECIALS, Vocab
from pretraining.errors import HeadMismatchError, ModelError
from pretraining.model import (
    HeadType,
    ModelConfig,
    backward,
    forward,
    init_params,
    loss,
    parameter_count,
    predict_binary,
    self_attention,
    zero_params,
)
from pretraining.objectives import (
    Objective,
    ObjectiveConfig,
    corrupt_rts,
    corrupt_slm,
    replace_at,
    targets_slm_all,
)
from pretraining.train import AdamMoments, TrainConfig, adam_step

VOCAB = Vocab.from_tokens([f"w{i}" for i in range(20)])


def small_batch():
    rng = np.random.default_rng(0)
    rows = [rng.integers(NUM_SPECIALS, VOCAB.size, size=n).tolist() for n in (8, 5, 3)]
    return make_batch(rows, max_len=10)


def corrupted(kind):
    batch = small_batch()
    rng = np.random.default_rng(1)
    if kind == "binary":
        return corrupt_rts(batch, VOCAB, ObjectiveConfig(replace_rate=0.3), rng)
    if kind == "lm":
        return corrupt_slm(batch, VOCAB, ObjectiveConfig(objective=Objective.SLM, replace_rate=0.3), rng)
    return targets_slm_all(corrupt_rts(batch, VOCAB, ObjectiveConfig(replace_rate=0.3), rng))


def config_for(head_type, **overrides):
    return ModelConfig(layers=2, hidden=8, heads=2, intermediate=16, max_len=12, vocab_size=VOCAB.size,
                       head_type=head_type, init_std=0.2, **overrides)


CASES = {
    "binary": ("binary", {}),
    "lm": ("lm", {}),
    "slm_all": ("slm_all", {}),
    "lm_untied": ("lm", {"tie_lm_head": False}),
    "binary_dropout": ("binary", {"dropout": 0.2}),
}


@pytest.mark.parametrize("case", sorted(CASES))
def test_gradients_match_central_differences(case):
    kind, overrides = CASES[case]
    config = config_for(HeadType.BINARY if kind == "binary" else HeadType.LM, **overrides)
    params = init_params(config, seed=3)
    cb = corrupted(kind)

    def dropout_rng():
        return np.random.default_rng(5) if config.dropout else None

    def objective():
        return loss(cb, forward(params, config, cb, rng=dropout_rng())[0])

    _, cache = forward(params, config, cb, rng=dropout_rng())
    grads = backward(params, cache, cb)

    slots = [(name, k) for name, value in params.items() for k in range(value.size)]
    rng = np.random.default_rng(7)
    eps = 1e-5
    for s in rng.choice(len(slots), size=1000, replace=False):
        name, k = slots[s]
        flat = params[name].reshape(-1)
        saved = flat[k]
        flat[k] = saved + eps
        up = objective()
        flat[k] = saved - eps
        down = objective()
        flat[k] = saved
        numeric = (up - down) / (2 * eps)
        analytic = grads[name].reshape(-1)[k]
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, (name, k)


def test_unused_head_gets_zero_gradient():
    binary = config_for(HeadType.BINARY)
    params = init_params(binary, seed=0)
    cb = corrupted("binary")
    grads = backward(params, forward(params, binary, cb)[1], cb)
    assert not grads["head.lm.bias"].any()
    assert grads["head.binary.weight"].any()

    lm = config_for(HeadType.LM)
    cb = corrupted("lm")
    grads = backward(params, forward(params, lm, cb)[1], cb)
    assert not grads["head.binary.weight"].any()
    assert not grads["head.binary.bias"].any()


def test_empty_loss_mask_gives_zero_loss_and_gradient():
    config = config_for(HeadType.BINARY)
    params = init_params(config)
    cb = corrupted("binary")
    cb = replace(cb, loss_mask=np.zeros_like(cb.loss_mask))
    logits, cache = forward(params, config, cb)
    assert loss(cb, logits) == 0.0
    assert all(not g.any() for g in backward(params, cache, cb).values())


def test_loss_at_flat_logits():
    cb = corrupted("binary")
    assert loss(cb, np.zeros(cb.shape + (1,))) == pytest.approx(np.log(2.0))
    cb = corrupted("lm")
    assert loss(cb, np.zeros(cb.shape + (VOCAB.size,))) == pytest.approx(np.log(VOCAB.size))


def test_head_must_fit_the_objective():
    cb = corrupted("lm")
    with pytest.raises(HeadMismatchError):
        loss(cb, np.zeros(cb.shape + (1,)))
    cb = corrupted("binary")
    with pytest.raises(HeadMismatchError):
        loss(cb, np.zeros(cb.shape + (VOCAB.size,)))


def test_attention_by_hand():
    x = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    weights = {f"{n}.weight": np.eye(2) for n in "qkvo"}
    weights.update({f"{n}.bias": np.zeros(2) for n in "qkvo"})
    p = expit(1.0 / np.sqrt(2.0))

    out, _ = self_attention(x, np.array([[True, True]]), weights, heads=1)
    assert out[0] == pytest.approx(np.array([[p, 1 - p], [1 - p, p]]))

    out, _ = self_attention(x, np.array([[True, False]]), weights, heads=1)
    assert out[0] == pytest.approx(np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_padding_does_not_leak_into_real_positions():
    config = config_for(HeadType.BINARY)
    params = init_params(config)
    cb = corrupted("binary")
    logits, _ = forward(params, config, cb)
    altered = replace(cb, input_ids=np.where(cb.attention_mask, cb.input_ids, NUM_SPECIALS + 1))
    logits2, _ = forward(params, config, altered)
    assert np.allclose(logits[cb.attention_mask], logits2[cb.attention_mask])


def test_forward_rejects_bad_inputs():
    config = config_for(HeadType.BINARY)
    params = init_params(config)
    cb = corrupted("binary")
    with pytest.raises(ModelError):
        forward(params, config.model_copy(update={"max_len": 8}), cb)
    with pytest.raises(ModelError):
        forward(params, config, replace(cb, input_ids=np.full(cb.shape, VOCAB.size)))


def test_config_validation_and_sizes():
    with pytest.raises(ValidationError):
        ModelConfig(hidden=10, heads=4, vocab_size=50)
    with pytest.raises(ValidationError):
        ModelConfig(vocab_size=NUM_SPECIALS)
    for tie in (True, False):
        config = config_for(HeadType.LM, tie_lm_head=tie)
        assert parameter_count(config) == sum(v.size for v in init_params(config).values())
    assert ModelConfig.base_size().hidden == 768
    assert ModelConfig.base_generator().head_type == HeadType.LM


def test_fast_path_agrees_with_reference():
    config = config_for(HeadType.LM)
    params = init_params(config)
    cb = corrupted("lm")
    ref, _ = forward(params, config, cb)
    fast, _ = forward(params, config.model_copy(update={"dtype": "float32"}), cb)
    assert fast.dtype == np.float32
    assert np.allclose(ref, fast, atol=1e-4)


def test_dropout_only_with_an_rng():
    config = config_for(HeadType.BINARY, dropout=0.5)
    params = init_params(config)
    cb = corrupted("binary")
    plain, _ = forward(params, config, cb)
    again, _ = forward(params, config, cb)
    dropped, _ = forward(params, config, cb, rng=np.random.default_rng(0))
    assert np.array_equal(plain, again)
    assert not np.allclose(plain, dropped)


def test_predict_binary():
    assert predict_binary(np.array([[[2.0], [-1.0], [0.0]]])).tolist() == [[True, False, False]]
    with pytest.raises(HeadMismatchError):
        predict_binary(np.zeros((1, 2, 3)))


def test_zero_parameters_give_zero_logits():
    for head_type in (HeadType.BINARY, HeadType.LM):
        config = config_for(head_type)
        logits, _ = forward(zero_params(config), config, corrupted("binary"))
        assert not logits.any()
    config = config_for(HeadType.BINARY)
    logits, _ = forward(zero_params(config), config, corrupted("binary"))
    assert (expit(logits) == 0.5).all()


def test_confident_correct_logits_give_near_zero_loss():
    cb = corrupted("lm")
    logits = np.zeros(cb.shape + (VOCAB.size,))
    rows, cols = np.nonzero(cb.loss_mask)
    logits[rows, cols, cb.labels[rows, cols]] = 30.0
    assert 0.0 <= loss(cb, logits) < 1e-9


def test_attention_rows_sum_to_one_over_real_keys():
    config = config_for(HeadType.BINARY)
    cb = corrupted("binary")
    _, cache = forward(init_params(config, seed=4), config, cb)
    attention = np.asarray(cb.attention_mask, dtype=bool)
    for layer in cache["layers"]:
        probs = layer["attn"]["probs"]
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-9
        for b in range(attention.shape[0]):
            assert not probs[b][..., ~attention[b]].any()


def test_slm_all_learns_the_identity_on_clean_input():
    rng = np.random.default_rng(0)
    rows = [rng.permutation(np.arange(NUM_SPECIALS, VOCAB.size))[:8].tolist() for _ in range(8)]
    batch = make_batch(rows, max_len=10)
    # nothing is replaced, so every target is the token already in place
    cb = targets_slm_all(replace_at(batch, np.zeros(batch.ids.shape, dtype=bool), VOCAB, rng))
    config = ModelConfig(layers=1, hidden=32, heads=2, intermediate=64, max_len=10, vocab_size=VOCAB.size,
                         head_type=HeadType.LM)
    cfg = TrainConfig(weight_decay=0.0, warmup_steps=0, base_steps=200, total_steps=200)
    params = init_params(config, seed=0)
    moments = AdamMoments.zeros(params)
    for step in range(1, 201):
        _, cache = forward(params, config, cb)
        params, moments = adam_step(params, backward(params, cache, cb), moments, step, cfg, 2e-2)
    assert loss(cb, forward(params, config, cb)[0]) < 0.1
