"""End-to-end finite-difference check of a tiny model (chart + heads)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from treeformer import autodiff as ad
from treeformer.autodiff import GradCheckReport
from treeformer.data import Batch
from treeformer.errors import ContractError
from treeformer.model import ModelConfig, TreeformerModel
from treeformer.seq2seq import BOS, EOS

MAX_D = 16
MAX_N = 8
# Differences are always taken in float64; float32 runs only the analytic pass.
FD_STEP = 1e-4


def tiny_batch(head: str, n: int, vocab: int, rng: np.random.Generator) -> Batch:
    """Two sequences of lengths n and n-1 (or 1), so padding is exercised."""
    lengths = np.array([n, max(1, n - 1)], dtype=np.intp)
    source = np.zeros((2, n), dtype=np.intp)
    for b, m in enumerate(lengths):
        source[b, :m] = rng.integers(3, vocab, size=m)
    if head == "classify":
        return Batch(source, lengths, labels=np.array([0, 1], dtype=np.intp))
    targets = [[BOS, *source[b, :m].tolist(), EOS] for b, m in enumerate(lengths)]
    return Batch(source, lengths, targets=targets)


def check_model(head: str, *, d: int = 8, n: int = 6, H: int = 3, L: int = 1, dtype=np.float64,
                tolerance: float = 1e-6, seed: int = 0, max_entries: int | None = None) -> GradCheckReport:
    if d > MAX_D or n > MAX_N:
        raise ContractError(f"gradcheck needs a tiny config (d <= {MAX_D}, n <= {MAX_N}), got d={d}, n={n}")
    if d % 2:
        raise ContractError(f"d must be even (two attention heads), got {d}")
    dtype = np.dtype(dtype).type
    with ad.precision(dtype):
        config = ModelConfig(head=head, vocab_size=7, d=d, H=H, L=L, L_dec=1, n_heads=2, d_ffn=2 * d,
                             dropout=0.0, max_output_length=n + 2, seed=seed)
        model = TreeformerModel(config)
        batch = tiny_batch(head, n, config.vocab_size, np.random.default_rng(seed + 7))
        return ad.grad_check(lambda: model.loss(batch), model.named_parameters(), step=FD_STEP,
                             tolerance=tolerance, max_entries=max_entries, seed=seed,
                             reference_dtype=np.float64)


def run_gradcheck(*, d: int = 8, n: int = 6, H: int = 3, L: int = 1, dtype=np.float64, tolerance: float = 1e-6,
                  seed: int = 0, heads: Sequence[str] = ("classify", "seq2seq")) -> GradCheckReport:
    """Check each head; parameter groups are prefixed with the head name."""
    merged = GradCheckReport(tolerance=tolerance)
    for head in heads:
        report = check_model(head, d=d, n=n, H=H, L=L, dtype=dtype, tolerance=tolerance, seed=seed)
        merged.errors.update({f"{head}/{name}": err for name, err in report.errors.items()})
    return merged
