from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeformer.data import (
    DatasetConfig,
    Example,
    batch_iter,
    format_dataset,
    gen_copy_reverse,
    gen_dyck,
    is_dyck,
    random_dyck,
    read_dataset,
    to_ids,
    write_dataset,
)
from treeformer.errors import ConfigError
from treeformer.seq2seq import BOS, EOS


@pytest.mark.parametrize("text,valid", [("(())", True), ("(()", False), ("([)]", False), ("[()]()", True), ("", True)])
def test_stack_checker(text, valid):
    assert is_dyck(to_ids(text)) is valid


def test_dyck_labels_balanced_and_correct():
    examples = gen_dyck(DatasetConfig(count=400, seed=3, max_length=24))
    labels = [e.target for e in examples]
    assert sum(labels) == 200
    for e in examples:
        assert is_dyck(e.source) == bool(e.target)
        assert 1 <= len(e.source) <= 24


@settings(max_examples=30)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_random_dyck_is_valid(half, seed):
    s = random_dyck(2 * half, np.random.default_rng(seed))
    assert len(s) == 2 * half and is_dyck(s)


@pytest.mark.parametrize("task", ["copy", "reverse"])
def test_copy_and_reverse_targets(task):
    config = DatasetConfig(task=task, min_length=1, max_length=12, vocab_size=8, count=50, seed=4)
    for e in gen_copy_reverse(config):
        payload = e.source if task == "copy" else e.source[::-1]
        assert e.target == [BOS, *payload, EOS]
        assert all(3 <= t < 8 for t in e.source) and 1 <= len(e.source) <= 12


def test_length_one_is_a_fixed_point():
    for task in ("copy", "reverse"):
        for e in gen_copy_reverse(DatasetConfig(task=task, min_length=1, max_length=1, vocab_size=9, count=5)):
            assert e.target[1:-1] == e.source


def test_batch_padding_and_lengths():
    (batch,) = batch_iter([Example([3, 4, 5], 1), Example([3, 4, 5, 6, 3], 0)], 4)
    assert batch.source.shape == (2, 5) and batch.lengths.tolist() == [3, 5]
    assert batch.source[0, 3:].tolist() == [0, 0]


def test_batch_iteration_reproducible_and_conserving():
    examples = gen_dyck(DatasetConfig(count=50, seed=1))
    a = [b.source.tolist() for b in batch_iter(examples, 8, shuffle_seed=5)]
    b = [b.source.tolist() for b in batch_iter(examples, 8, shuffle_seed=5)]
    assert a == b
    total = sum(int(b.lengths.sum()) for b in batch_iter(examples, 8, shuffle_seed=5))
    assert total == sum(len(e.source) for e in examples)


def test_dataset_round_trip_and_overwrite_guard(tmp_path):
    config = DatasetConfig(task="reverse", vocab_size=10, count=20, seed=2)
    examples = gen_copy_reverse(config)
    path = tmp_path / "d.tsv"
    write_dataset(path, examples, config)
    with pytest.raises(FileExistsError):
        write_dataset(path, examples, config)
    write_dataset(path, examples, config, force=True)
    got_config, got = read_dataset(path)
    assert got_config == config and got == examples
    with pytest.raises(FileNotFoundError):
        write_dataset(tmp_path / "missing" / "d.tsv", examples, config)


def test_same_seed_same_bytes():
    config = DatasetConfig(count=30, seed=9)
    assert format_dataset(gen_dyck(config), config) == format_dataset(gen_dyck(config), config)


def test_bad_configs():
    with pytest.raises(ConfigError):
        DatasetConfig(task="sort")
    with pytest.raises(ConfigError):
        DatasetConfig(max_length=7)
    with pytest.raises(ConfigError):
        DatasetConfig(task="copy", vocab_size=3)
