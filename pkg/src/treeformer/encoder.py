"""Chart encoder: compose pairs of sub-span vectors, pool over split points.

Two schedules fill the same chart.  :func:`encode_sequential` visits one
cell at a time, shortest spans first.  :func:`encode_levelwise` handles all
spans of one length, across a whole batch, as a single batched
compose-and-pool; it is the path used for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from treeformer import autodiff as ad
from treeformer.autodiff import Tensor
from treeformer.chart import LevelPlan, Span, SpanChart, split_pairs
from treeformer.errors import ContractError, DimensionError, EmptyInputError


@dataclass
class TreeformerConfig:
    d: int = 64
    H: int = 6
    dropout: float = 0.0
    seed: int = 0
    compose_bias: bool = True
    learned_qk: bool = True
    activation: str = "none"  # "none" | "tanh"

    def __post_init__(self):
        if self.d < 1:
            raise ContractError(f"d must be >= 1, got {self.d}")
        if self.H < 1:
            raise ContractError(f"H must be >= 1, got {self.H}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.activation not in ("none", "tanh"):
            raise ContractError(f"unknown activation {self.activation!r}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TreeformerParams:
    """Composition matrix ``W`` (d x 2d), bias ``b``, pooling target ``w``,
    query/key projections ``Q`` and ``K`` (d x d each)."""

    def __init__(self, W, w, Q=None, K=None, b=None):
        self.W = W
        self.b = b
        self.w = w
        self.Q = Q
        self.K = K
        d = w.shape[0]
        if W.shape != (d, 2 * d):
            raise DimensionError(f"W has shape {W.shape}, expected ({d}, {2 * d})")
        for name, m in (("Q", Q), ("K", K)):
            if m is not None and m.shape != (d, d):
                raise DimensionError(f"{name} has shape {m.shape}, expected ({d}, {d})")
        if b is not None and b.shape != (d,):
            raise DimensionError(f"b has shape {b.shape}, expected ({d},)")

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @classmethod
    def init(cls, config: TreeformerConfig, rng: np.random.Generator | None = None) -> "TreeformerParams":
        rng = rng or np.random.default_rng(config.seed)
        d = config.d
        W = ad.parameter(uniform_init(rng, (d, 2 * d), 2 * d), "W")
        w = ad.parameter(uniform_init(rng, (d,), d), "w")
        Q = K = None
        if config.learned_qk:
            Q = ad.parameter(uniform_init(rng, (d, d), d), "Q")
            K = ad.parameter(uniform_init(rng, (d, d), d), "K")
        b = ad.parameter(np.zeros(d), "b") if config.compose_bias else None
        return cls(W=W, w=w, Q=Q, K=K, b=b)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"W": self.W}
        if self.b is not None:
            out["b"] = self.b
        out["w"] = self.w
        if self.Q is not None:
            out["Q"] = self.Q
            out["K"] = self.K
        return out

    def pool_target(self) -> Tensor:
        """``K @ w``, constant across candidates and cells."""
        if self.K is None:
            return self.w
        return ad.matmul(self.K, self.w.reshape(self.d, 1)).reshape(self.d)

    def score_direction(self) -> Tensor:
        """``Q^T K w``: the score of candidate c is ``c . Q^T K w``."""
        target = self.pool_target()
        if self.Q is None:
            return target
        return ad.matmul(target.reshape(1, self.d), self.Q).reshape(self.d)

    def compose_halves(self) -> tuple[Tensor, Tensor]:
        """Left and right column blocks of ``W``."""
        d = self.d
        return ad.slice_last(self.W, 0, d), ad.slice_last(self.W, d, 2 * d)


@dataclass
class OpCounters:
    compositions: int = 0
    pooling_candidate_total: int = 0
    cells_written: int = 0
    level_steps: int = 0

    def reset(self) -> None:
        self.compositions = self.pooling_candidate_total = 0
        self.cells_written = self.level_steps = 0

    def merge(self, other: "OpCounters") -> None:
        self.compositions += other.compositions
        self.pooling_candidate_total += other.pooling_candidate_total
        self.cells_written += other.cells_written
        self.level_steps = max(self.level_steps, other.level_steps)


@dataclass
class EncodeOptions:
    training: bool = False
    rng: np.random.Generator | None = None
    counters: OpCounters | None = None
    keep_weights: bool = False
    activation: str = "none"
    dropout: float = 0.0


# ---------------------------------------------------------------------------
# primitives


def compose(left: Tensor, right: Tensor, params: TreeformerParams, activation: str = "none") -> Tensor:
    """``W @ [left, right] (+ b)`` over the last axis; works on stacked rows too."""
    d = params.d
    if left.shape[-1] != d or right.shape[-1] != d:
        raise DimensionError(f"compose expects width {d}, got {left.shape} and {right.shape}")
    out = ad.linear(ad.concat_last(left, right), params.W, params.b)
    if activation == "tanh":
        out = ad.tanh(out)
    return out


def pool_scores(candidates: Tensor, params: TreeformerParams, target: Tensor | None = None) -> Tensor:
    """Scaled scores ``(Q c_k) . (K w) / sqrt(d)`` for candidates [..., k, d] -> [..., k]."""
    d = params.d
    target = params.pool_target() if target is None else target
    queries = candidates if params.Q is None else ad.linear(candidates, params.Q)
    lead = candidates.shape[:-1]
    flat = queries.reshape(-1, d)
    scores = ad.matmul(flat, target.reshape(d, 1)).reshape(lead)
    return scores * (1.0 / math.sqrt(d))


def pool_weights(candidates: Tensor, params: TreeformerParams, target: Tensor | None = None) -> Tensor:
    return ad.softmax_last(pool_scores(candidates, params, target))


def pool(candidates, params: TreeformerParams, target: Tensor | None = None, return_weights: bool = False):
    """Attention-weighted average of candidate vectors.

    ``candidates`` is a list of d-vectors or a (k, d) tensor; the result is a
    convex combination of them.
    """
    if isinstance(candidates, (list, tuple)):
        if not candidates:
            raise ContractError("pool needs at least one candidate")
        stacked = ad.stack(list(candidates))
    else:
        stacked = candidates
        if stacked.shape[0] == 0:
            raise ContractError("pool needs at least one candidate")
    if stacked.ndim != 2 or stacked.shape[1] != params.d:
        raise DimensionError(f"pool expects (k, {params.d}) candidates, got {stacked.shape}")
    k = stacked.shape[0]
    weights = pool_weights(stacked, params, target)
    out = ad.matmul(weights.reshape(1, k), stacked).reshape(params.d)
    return (out, weights.data) if return_weights else out


# ---------------------------------------------------------------------------
# schedules


def _as_token_tensors(tokens, d: int) -> list[Tensor]:
    if isinstance(tokens, Tensor):
        if tokens.ndim != 2:
            raise DimensionError(f"token matrix must be (n, d), got {tokens.shape}")
        return [ad.take_rows(tokens, [i]).reshape(d) for i in range(tokens.shape[0])]
    return [t if isinstance(t, Tensor) else Tensor(t) for t in tokens]


def encode_sequential(tokens, config: TreeformerConfig, params: TreeformerParams,
                      options: EncodeOptions | None = None) -> SpanChart:
    """Fill a chart one cell at a time: ascending length, ascending start.

    Each cell of length h >= 2 pools the compositions of its h - 1 splits.
    """
    opts = options or EncodeOptions(activation=config.activation, dropout=config.dropout)
    d = params.d
    if isinstance(tokens, Tensor):
        n = tokens.shape[0]
    else:
        n = len(tokens)
    if n == 0:
        raise EmptyInputError("cannot encode an empty sequence")
    vecs = _as_token_tensors(tokens, d)
    chart = SpanChart(n, config.H, d)
    for i, v in enumerate(vecs):
        if v.shape != (d,):
            raise DimensionError(f"token {i} has shape {v.shape}, expected ({d},)")
        chart.write(Span(i, i), v)
    counters = opts.counters
    if counters is not None:
        counters.cells_written += n
    target = params.pool_target() if chart.H > 1 else None
    for h in range(2, chart.H + 1):
        for span in chart.cells_of_length(h):
            cands = []
            for left, right in split_pairs(span):
                c = compose(chart.cell(left), chart.cell(right), params, opts.activation)
                cands.append(c)
            stacked = ad.stack(cands)
            stacked = ad.dropout(stacked, opts.dropout, opts.rng, opts.training)
            out, weights = pool(stacked, params, target, return_weights=True)
            chart.write(span, out)
            if opts.keep_weights:
                chart.weights[span] = np.array(weights, dtype=np.float64)
            if counters is not None:
                counters.compositions += len(cands)
                counters.pooling_candidate_total += len(cands)
                counters.cells_written += 1
        if counters is not None:
            counters.level_steps += 1
    return chart


@dataclass
class BatchedChart:
    """Result of a level-parallel encode: one tensor per level plus the index plan."""

    plan: LevelPlan
    levels: list[Tensor]
    d: int
    weights: list[np.ndarray | None] = field(default_factory=list)

    def arena(self) -> Tensor:
        return self.levels[0] if len(self.levels) == 1 else ad.concat_rows(self.levels)

    def charts(self) -> list[SpanChart]:
        out = []
        for b, n in enumerate(self.plan.lengths):
            n = int(n)
            chart = SpanChart(n, self.plan.H, self.d)
            for h in range(1, chart.H + 1):
                block = self.levels[h - 1]
                lo, _ = self.plan.level_rows(h)
                chart.write_level(h, block, self.plan.row(b, h, 0) - lo)
            if self.weights:
                for h in range(2, chart.H + 1):
                    w = self.weights[h - 1]
                    first_span = int(self.plan.level_starts[h - 1][b] - self.plan.level_rows(h)[0])
                    for i in range(n - h + 1):
                        chart.weights[Span(i, i + h - 1)] = w[first_span + i]
            out.append(chart)
        return out

    def memory(self) -> tuple[Tensor, np.ndarray]:
        """Decoder memory (B, m_max, d) and its validity mask."""
        index, mask = self.plan.memory_index()
        gathered = ad.take_rows(self.arena(), index.reshape(-1))
        return gathered.reshape(index.shape[0], index.shape[1], self.d), mask

    def _segment_mean(self, groups: list[np.ndarray]) -> Tensor:
        arena = self.arena()
        rows = np.concatenate(groups)
        avg = np.zeros((len(groups), rows.size))
        col = 0
        for b, g in enumerate(groups):
            avg[b, col:col + g.size] = 1.0 / g.size
            col += g.size
        picked = ad.take_rows(arena, rows)
        return ad.matmul(Tensor(avg, dtype=arena.data.dtype), picked)

    def top_level_summary(self) -> Tensor:
        """(B, d): mean of each sequence's longest materialised level."""
        return self._segment_mean(self.plan.top_rows())

    def token_mean(self) -> Tensor:
        return self._segment_mean(self.plan.token_rows())


def encode_levelwise(tokens_batch, config: TreeformerConfig, params: TreeformerParams,
                     options: EncodeOptions | None = None, lengths=None) -> BatchedChart:
    """Fill every chart in a batch, one span length at a time.

    ``tokens_batch`` is either a list of (n_b, d) tensors or a single
    (sum n_b, d) tensor of concatenated token vectors with ``lengths``.
    All spans of length h across the batch are composed and pooled together;
    there are exactly ``min(H, max n) - 1`` dependent stages.
    """
    opts = options or EncodeOptions(activation=config.activation, dropout=config.dropout)
    d = params.d
    if isinstance(tokens_batch, Tensor):
        if lengths is None:
            raise ContractError("lengths are required with a concatenated token tensor")
        tokens = tokens_batch
    else:
        seqs = [t if isinstance(t, Tensor) else Tensor(t) for t in tokens_batch]
        if not seqs:
            raise EmptyInputError("empty batch")
        for s in seqs:
            if s.ndim != 2 or s.shape[0] == 0:
                raise EmptyInputError("every sequence needs at least one token vector")
        lengths = [s.shape[0] for s in seqs]
        tokens = ad.concat_rows(seqs) if len(seqs) > 1 else seqs[0]
    if tokens.shape[-1] != d:
        raise DimensionError(f"token width {tokens.shape[-1]} does not match d={d}")
    plan = LevelPlan(np.asarray(lengths), config.H)
    if tokens.shape[0] != int(plan.lengths.sum()):
        raise DimensionError("token rows do not match the sum of lengths")
    counters = opts.counters
    levels = [tokens]
    weights: list[np.ndarray | None] = [None]
    if counters is not None:
        counters.cells_written += tokens.shape[0]
    if plan.top > 1:
        # W [l, r] = W_left l + W_right r: project every cell once, then each
        # split is a gather and an add
        w_left, w_right = params.compose_halves()
        direction = params.score_direction()
        left_proj = [ad.linear(tokens, w_left)]
        right_proj = [ad.linear(tokens, w_right)]
    for h in range(2, plan.top + 1):
        left_rows, right_rows, _ = plan.split_indices(h)
        spans = left_rows.size // (h - 1)
        left_arena = ad.concat_rows(left_proj) if len(left_proj) > 1 else left_proj[0]
        right_arena = ad.concat_rows(right_proj) if len(right_proj) > 1 else right_proj[0]
        cands = ad.add(ad.take_rows(left_arena, left_rows), ad.take_rows(right_arena, right_rows))
        if params.b is not None:
            cands = ad.add(cands, params.b)
        if opts.activation == "tanh":
            cands = ad.tanh(cands)
        cands = ad.dropout(cands, opts.dropout, opts.rng, opts.training)
        scores = ad.matmul(cands, direction.reshape(d, 1)).reshape(spans, h - 1)
        w = ad.softmax_last(scores * (1.0 / math.sqrt(d)))
        out = ad.matmul(w.reshape(spans, 1, h - 1), cands.reshape(spans, h - 1, d)).reshape(spans, d)
        levels.append(out)
        weights.append(w.data if opts.keep_weights else None)
        if h < plan.top:
            left_proj.append(ad.linear(out, w_left))
            right_proj.append(ad.linear(out, w_right))
        if counters is not None:
            counters.compositions += left_rows.size
            counters.pooling_candidate_total += left_rows.size
            counters.cells_written += spans
            counters.level_steps += 1
    return BatchedChart(plan=plan, levels=levels, d=d, weights=weights if opts.keep_weights else [])


def top_level_summary(chart: SpanChart) -> Tensor:
    """Mean of the cells of length ``min(H, n)``."""
    if not chart.complete:
        raise ContractError("chart is incomplete")
    level = chart.level(chart.H)
    return ad.mean(level, axis=0)
