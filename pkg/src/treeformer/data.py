"""Synthetic tasks: Dyck-2 validity and copy / reverse transduction.

Ids 0, 1 and 2 are reserved for padding, begin and end of sequence.
Brackets map to ``( ) [ ]`` -> 3 4 5 6.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from treeformer.errors import ConfigError, ContractError
from treeformer.seq2seq import BOS, EOS, PAD

BRACKETS = "()[]"
OPEN_TO_CLOSE = {3: 4, 5: 6}
CLOSERS = {4: 3, 6: 5}
DYCK_VOCAB = 7
TASKS = ("dyck2", "copy", "reverse")


@dataclass
class DatasetConfig:
    task: str = "dyck2"
    min_length: int = 2
    max_length: int = 24
    vocab_size: int = 7
    count: int = 1000
    seed: int = 0
    corruption_rate: float = 0.5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.min_length < 1 or self.min_length > self.max_length:
            raise ConfigError(f"need 1 <= min_length <= max_length, got {self.min_length}..{self.max_length}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.task == "dyck2":
            if self.max_length < 2 or self.max_length % 2:
                raise ConfigError("dyck2 needs an even max_length >= 2")
            if self.vocab_size != DYCK_VOCAB:
                raise ConfigError(f"dyck2 uses a fixed vocabulary of {DYCK_VOCAB} ids")
            if not 0.0 < self.corruption_rate < 1.0:
                raise ConfigError("corruption_rate must lie in (0, 1)")
        elif self.vocab_size < 4:
            raise ConfigError("copy/reverse need vocab_size >= 4 (3 reserved ids plus payload)")


@dataclass
class Example:
    source: list[int]
    target: list[int] | int

    @property
    def length(self) -> int:
        return len(self.source)


def to_ids(text: str) -> list[int]:
    try:
        return [3 + BRACKETS.index(ch) for ch in text if not ch.isspace()]
    except ValueError:
        raise ContractError(f"{text!r} contains a character outside {BRACKETS!r}") from None


def to_text(ids: Sequence[int]) -> str:
    return "".join(BRACKETS[i - 3] for i in ids)


def is_dyck(ids: Sequence[int]) -> bool:
    """Stack check: every closer matches the most recent unmatched opener."""
    stack = []
    for t in ids:
        if t in OPEN_TO_CLOSE:
            stack.append(t)
        elif t in CLOSERS:
            if not stack or stack.pop() != CLOSERS[t]:
                return False
        else:
            return False
    return not stack


def random_dyck(length: int, rng: np.random.Generator) -> list[int]:
    """A well-nested string of even ``length`` over both bracket pairs."""
    out, stack = [], []
    for pos in range(length):
        if stack and length - pos == len(stack):
            out.append(OPEN_TO_CLOSE[stack.pop()])
        elif not stack or rng.random() < 0.5:
            opener = 3 if rng.random() < 0.5 else 5
            stack.append(opener)
            out.append(opener)
        else:
            out.append(OPEN_TO_CLOSE[stack.pop()])
    return out


def corrupt(ids: list[int], rng: np.random.Generator) -> list[int]:
    """One swap, deletion or substitution that leaves the string invalid."""
    while True:
        s = list(ids)
        kind = rng.integers(3)
        if kind == 0:
            i, j = sorted(rng.choice(len(s), size=2, replace=False))
            if s[i] == s[j]:
                continue
            s[i], s[j] = s[j], s[i]
        elif kind == 1:
            if len(s) < 2:
                continue
            del s[rng.integers(len(s))]
        else:
            i = rng.integers(len(s))
            s[i] = int(rng.choice([t for t in (3, 4, 5, 6) if t != s[i]]))
        if not is_dyck(s):
            return s


def gen_dyck(config: DatasetConfig) -> list[Example]:
    """Balanced valid / invalid Dyck-2 strings; label 1 means valid."""
    rng = np.random.default_rng(config.seed)
    lo = max(2, config.min_length + (config.min_length % 2))
    even_lengths = np.arange(lo, config.max_length + 1, 2)
    n_neg = int(round(config.count * config.corruption_rate))
    labels = np.array([0] * n_neg + [1] * (config.count - n_neg))
    rng.shuffle(labels)
    out = []
    for label in labels:
        s = random_dyck(int(rng.choice(even_lengths)), rng)
        if label == 0:
            s = corrupt(s, rng)
        out.append(Example(s, int(label)))
    return out


def gen_copy_reverse(config: DatasetConfig) -> list[Example]:
    rng = np.random.default_rng(config.seed)
    out = []
    for _ in range(config.count):
        n = int(rng.integers(config.min_length, config.max_length + 1))
        src = [int(t) for t in rng.integers(3, config.vocab_size, size=n)]
        payload = src if config.task == "copy" else src[::-1]
        out.append(Example(src, [BOS] + payload + [EOS]))
    return out


def generate(config: DatasetConfig) -> list[Example]:
    return gen_dyck(config) if config.task == "dyck2" else gen_copy_reverse(config)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    source: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None
    targets: list[list[int]] | None = None

    def __len__(self) -> int:
        return len(self.lengths)


def make_batch(examples: Sequence[Example]) -> Batch:
    lengths = np.array([len(e.source) for e in examples], dtype=np.intp)
    source = np.full((len(examples), lengths.max()), PAD, dtype=np.intp)
    for b, e in enumerate(examples):
        source[b, :len(e.source)] = e.source
    if isinstance(examples[0].target, int):
        return Batch(source, lengths, labels=np.array([e.target for e in examples], dtype=np.intp))
    return Batch(source, lengths, targets=[list(e.target) for e in examples])


def batch_iter(examples: Sequence[Example], batch_size: int, shuffle_seed: int | None = None) -> Iterator[Batch]:
    """One pass over ``examples`` in padded batches; shuffled when a seed is given."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield make_batch([examples[k] for k in order[start:start + batch_size]])


# ---------------------------------------------------------------------------
# files


def format_dataset(examples: Sequence[Example], config: DatasetConfig) -> str:
    lines = ["# " + json.dumps(asdict(config), sort_keys=True)]
    for e in examples:
        tgt = str(e.target) if isinstance(e.target, int) else " ".join(map(str, e.target))
        lines.append(" ".join(map(str, e.source)) + "\t" + tgt)
    return "\n".join(lines) + "\n"


def write_dataset(path: Path, examples: Sequence[Example], config: DatasetConfig, force: bool = False) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.write_bytes(format_dataset(examples, config).encode("utf-8"))


def read_dataset(path: Path) -> tuple[DatasetConfig, list[Example]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset {path} not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ConfigError(f"{path}: missing config header line")
    config = DatasetConfig(**json.loads(lines[0][2:]))
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            src, tgt = line.split("\t")
            source = [int(t) for t in src.split()]
            target = int(tgt) if config.task == "dyck2" else [int(t) for t in tgt.split()]
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: malformed line ({exc})") from None
        examples.append(Example(source, target))
    return config, examples
