from __future__ import annotations

import math

import numpy as np
import pytest

from treeformer import autodiff as ad
from treeformer.checkpoint import load_checkpoint
from treeformer.config import RunConfig
from treeformer.data import DatasetConfig, generate
from treeformer.errors import NumericError
from treeformer.model import TreeformerModel
from treeformer.train import evaluate, load_model, train

TINY = dict(d=16, n_heads=2, d_ffn=32, L=1, L_dec=1, H=3, warmup=10, eval_every=25)


@pytest.fixture(scope="module")
def copy_data():
    cfg = dict(task="copy", min_length=1, max_length=6, vocab_size=8)
    return (generate(DatasetConfig(count=200, seed=1, **cfg)),
            generate(DatasetConfig(count=40, seed=2, **cfg)))


def test_copy_smoke_run_writes_loadable_checkpoint(tmp_path, copy_data):
    train_ex, valid_ex = copy_data
    run = RunConfig(task="copy", max_steps=50, **TINY)
    result = train(run, train_ex, valid_ex, 8, tmp_path / "m.ckpt", tmp_path / "m.log")
    assert len(result.losses) == 50 and all(math.isfinite(v) for v in result.losses)
    model, loaded_run, ckpt = load_model(tmp_path / "m.ckpt")
    assert loaded_run.task == "copy" and ckpt.step == result.best_step
    assert evaluate(model, valid_ex) == pytest.approx(result.best_metric)
    lines = (tmp_path / "m.log").read_text().splitlines()
    assert lines[0].startswith("step=25\ttrain_loss=") and lines[-1].startswith("best_step=")


def test_fixed_seed_gives_identical_losses(copy_data):
    train_ex, valid_ex = copy_data
    run = RunConfig(task="copy", max_steps=20, **TINY)
    a = train(run, train_ex, valid_ex, 8).losses
    b = train(run, train_ex, valid_ex, 8).losses
    assert a == b


def test_train_metric_reproducible_from_checkpoint(tmp_path):
    train_ex = generate(DatasetConfig(count=300, seed=1))
    valid_ex = generate(DatasetConfig(count=60, seed=2))
    run = RunConfig(max_steps=60, **TINY)
    train(run, train_ex, valid_ex, 7, tmp_path / "d.ckpt")
    model, _, ckpt = load_model(tmp_path / "d.ckpt")
    assert abs(evaluate(model, train_ex) - ckpt.extra["train_metric"]) <= 1e-3


def test_untrained_model_is_at_chance():
    model = TreeformerModel(RunConfig(seed=3).model_config(7))
    acc = evaluate(model, generate(DatasetConfig(count=1000, seed=5)))
    assert abs(acc - 0.5) <= 0.03


def test_nan_loss_aborts_and_keeps_checkpoint(tmp_path, copy_data, monkeypatch):
    train_ex, valid_ex = copy_data
    run = RunConfig(task="copy", max_steps=60, **TINY)
    real_loss = TreeformerModel.loss
    calls = {"n": 0}

    def flaky(self, batch, training=False, rng=None):
        calls["n"] += 1
        out = real_loss(self, batch, training, rng)
        if calls["n"] > 30:
            return ad.mul_const(out, np.nan)
        return out

    monkeypatch.setattr(TreeformerModel, "loss", flaky)
    with pytest.raises(NumericError):
        train(run, train_ex, valid_ex, 8, tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt").step == 25


def test_greedy_and_beam_one_metrics_agree(copy_data):
    train_ex, valid_ex = copy_data
    result = train(RunConfig(task="copy", max_steps=30, **TINY), train_ex, valid_ex, 8)
    assert evaluate(result.model, valid_ex) == evaluate(result.model, valid_ex, beam=1)
