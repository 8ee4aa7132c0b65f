import numpy as np
import pandas as pd
import pytest

from pretraining.embed import train_sgns
from pretraining.errors import ConfigError, HeadMismatchError
from pretraining.model import HeadType
from pretraining.objectives import Objective, ObjectiveConfig
from pretraining.sweep import SWEEP_COLUMNS, best_cell, format_sweep, sweep_crts, sweep_jsonl
from pretraining.train import TrainConfig


def crts_config(**overrides):
    values = dict(peak_lr=1e-3, warmup_steps=1, base_steps=3, total_steps=3, batch_size=8, log_every=1,
                  objective=ObjectiveConfig(objective=Objective.CRTS))
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def table(encoded, vocab):
    return train_sgns(encoded, vocab, dim=8, epochs=1, seed=0)


def test_sweep_covers_the_grid(tmp_path, encoded, vocab, table, tiny_config):
    frame = sweep_crts(encoded, vocab, table, tiny_config, crts_config(), [2, 4], [1.0, 10.0],
                       heldout_batches=3, out_dir=tmp_path)
    assert list(frame.columns) == SWEEP_COLUMNS
    assert list(zip(frame["clusters"], frame["gamma"])) == [(2, 1.0), (2, 10.0), (4, 1.0), (4, 10.0)]
    assert np.allclose(frame["gap"], frame["acc_uniform"] - frame["acc_crts"])
    assert frame[["acc_uniform", "acc_crts"]].apply(lambda col: col.between(0.0, 1.0).all()).all()
    assert np.isfinite(frame["loss"]).all()
    assert (tmp_path / "clusters-4.txt").exists()
    assert (tmp_path / "n4-gamma10" / "metrics.jsonl").exists()

    again = sweep_crts(encoded, vocab, table, tiny_config, crts_config(), [2, 4], [1.0, 10.0], heldout_batches=3)
    pd.testing.assert_frame_equal(frame, again)
    assert len(sweep_jsonl(frame).splitlines()) == 4
    assert "acc_crts" in format_sweep(frame)


def test_best_cell_prefers_the_largest_gap():
    frame = pd.DataFrame({"clusters": [30, 100, 300], "gamma": [1.0, 2.0, 2.0], "loss": [0.5] * 3,
                          "acc_uniform": [0.9, 0.9, 0.9], "acc_crts": [0.8, 0.7, 0.7]})
    frame["gap"] = frame["acc_uniform"] - frame["acc_crts"]
    assert best_cell(frame)["clusters"] == 100
    assert best_cell(frame.iloc[0:0]) is None


def test_sweep_rejects_bad_setups(encoded, vocab, table, tiny_config):
    with pytest.raises(ConfigError):
        sweep_crts(encoded, vocab, table, tiny_config, crts_config(), [], [1.0])
    with pytest.raises(ConfigError):
        rts = crts_config(objective=ObjectiveConfig(objective=Objective.RTS))
        sweep_crts(encoded, vocab, table, tiny_config, rts, [2], [1.0])
    with pytest.raises(HeadMismatchError):
        lm = tiny_config.model_copy(update={"head_type": HeadType.LM})
        sweep_crts(encoded, vocab, table, lm, crts_config(), [2], [1.0])
