"""Training and evaluation loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from treeformer import autodiff as ad
from treeformer.checkpoint import Checkpoint, load_checkpoint, restore, save_checkpoint, snapshot
from treeformer.config import RunConfig
from treeformer.data import DYCK_VOCAB, Example, batch_iter, read_dataset
from treeformer.errors import ConfigError, NumericError
from treeformer.model import ModelConfig, TreeformerModel
from treeformer.seq2seq import strip_special

log = logging.getLogger(__name__)


def evaluate(model: TreeformerModel, examples: Sequence[Example], batch_size: int = 128,
             beam: int | None = None, length_penalty: float = 0.0) -> float:
    """Accuracy for classification, exact-sequence match for seq2seq.

    Seq2seq decoding is greedy when ``beam`` is None.
    """
    if not examples:
        return 0.0
    correct = 0
    for batch in batch_iter(examples, batch_size):
        if model.head is not None:
            correct += int((model.predict_classes(batch.source, batch.lengths) == batch.labels).sum())
        else:
            outs = model.generate(batch.source, batch.lengths, beam, length_penalty)
            for out, tgt in zip(outs, batch.targets):
                correct += strip_special(out) == strip_special(tgt)
    return correct / len(examples)


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    val_metric: float

    def line(self) -> str:
        return f"step={self.step}\ttrain_loss={self.train_loss:.6f}\tval_metric={self.val_metric:.6f}"


@dataclass
class TrainResult:
    model: TreeformerModel
    history: list[EvalRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    best_metric: float = -1.0
    best_step: int = 0
    train_metric: float | None = None
    checkpoint: Path | None = None


def vocab_for(task: str, dataset_vocab: int) -> int:
    return DYCK_VOCAB if task == "dyck2" else dataset_vocab


def train(run: RunConfig, train_examples: Sequence[Example], valid_examples: Sequence[Example],
          vocab_size: int, checkpoint_path: Path | None = None, metrics_path: Path | None = None,
          on_eval: Callable[[EvalRecord], None] | None = None) -> TrainResult:
    """Train from scratch, evaluating every ``run.eval_every`` steps.

    The best model by validation metric (earliest step on ties) is kept in
    memory and, if ``checkpoint_path`` is given, on disk.  A non-finite loss
    aborts training with :class:`NumericError`; the last good checkpoint stays.
    """
    model = TreeformerModel(run.model_config(vocab_size))
    params = model.named_parameters()
    opt = ad.Optimizer(params, run.optim_config())
    rng = np.random.default_rng(run.seed + 1)
    result = TrainResult(model=model, checkpoint=checkpoint_path)
    best: Checkpoint | None = None
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    recent: list[float] = []
    step = 0
    epoch = 0
    try:
        while step < run.max_steps:
            for batch in batch_iter(train_examples, run.batch_size, shuffle_seed=run.seed * 100003 + epoch):
                ad.new_tape()
                loss = model.loss(batch, training=True, rng=rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss became {value} at step {step + 1}; kept last good checkpoint")
                ad.backward(loss)
                opt.step()
                step += 1
                result.losses.append(value)
                recent.append(value)
                if step % run.eval_every == 0 or step == run.max_steps:
                    metric = evaluate(model, valid_examples)
                    rec = EvalRecord(step, float(np.mean(recent)), metric)
                    recent = []
                    result.history.append(rec)
                    if metrics:
                        metrics.write(rec.line() + "\n")
                        metrics.flush()
                    if on_eval:
                        on_eval(rec)
                    log.info(rec.line())
                    if metric > result.best_metric:
                        result.best_metric, result.best_step = metric, step
                        best = snapshot(params, run.to_dict(), step, metric, {"vocab_size": vocab_size})
                        if checkpoint_path:
                            save_checkpoint(checkpoint_path, best)
                if step >= run.max_steps:
                    break
            epoch += 1
    finally:
        if metrics:
            metrics.close()
    if best is not None:
        restore(params, best)
        result.train_metric = evaluate(model, train_examples)
        best.extra["train_metric"] = result.train_metric
        if checkpoint_path:
            save_checkpoint(checkpoint_path, best)
        if metrics_path:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(f"best_step={result.best_step}\tval_metric={result.best_metric:.6f}"
                         f"\ttrain_metric={result.train_metric:.6f}\n")
    return result


def model_from_checkpoint(checkpoint: Checkpoint) -> tuple[TreeformerModel, RunConfig]:
    run = RunConfig.from_dict(checkpoint.config)
    vocab = int(checkpoint.extra.get("vocab_size", DYCK_VOCAB))
    model = TreeformerModel(run.model_config(vocab))
    restore(model.named_parameters(), checkpoint)
    return model, run


def load_model(path) -> tuple[TreeformerModel, RunConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    model, run = model_from_checkpoint(ckpt)
    return model, run, ckpt


def load_examples(path, expect_task: str | None = None, vocab_size: int | None = None):
    config, examples = read_dataset(path)
    if expect_task is not None and config.task != expect_task:
        raise ConfigError(f"dataset {path} is task {config.task!r}, model expects {expect_task!r}")
    if vocab_size is not None:
        for e in examples:
            if e.source and max(e.source) >= vocab_size:
                raise ConfigError(f"dataset {path} uses ids beyond the model vocabulary ({vocab_size})")
    return config, examples
