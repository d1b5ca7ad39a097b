"""Triangular span chart truncated at a maximum phrase length.

Spans are 0-based and inclusive.  Cells live in a level-major arena: all
spans of length 1 first, then length 2, and so on, each level ordered by
start index.  ``offset(h, i)`` is therefore
``sum(n - g + 1 for g < h) + i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from treeformer.autodiff import Tensor, concat_rows, stack, take_rows
from treeformer.errors import ContractError, EmptyInputError


class Span(NamedTuple):
    i: int
    j: int

    @property
    def length(self) -> int:
        return self.j - self.i + 1

    def __str__(self) -> str:
        return f"({self.i},{self.j})"


def level_size(n: int, h: int) -> int:
    return max(n - h + 1, 0)


def cell_count(n: int, H: int) -> int:
    """Number of spans of length at most ``H`` in a sequence of ``n`` tokens."""
    top = min(H, n)
    return sum(n - h + 1 for h in range(1, top + 1))


def level_offset(n: int, h: int) -> int:
    # cells before level h: sum_{g<h} (n-g+1)
    g = h - 1
    return g * (n + 1) - g * (g + 1) // 2


def split_pairs(span: Span) -> list[tuple[Span, Span]]:
    """All (prefix, suffix) splits of ``span`` in ascending split point."""
    span = Span(*span)
    if span.length < 2:
        raise ContractError(f"span {span} has length 1 and cannot be split")
    return [(Span(span.i, k), Span(k + 1, span.j)) for k in range(span.i, span.j)]


def spans_of_length(n: int, h: int) -> list[Span]:
    return [Span(i, i + h - 1) for i in range(n - h + 1)]


class SpanChart:
    """Cell storage for one sequence.

    ``values`` is the numeric arena (cells x d).  ``nodes`` keeps the tensor
    that produced each cell so gradients can flow through chart reads;
    charts produced by the batched encoder share one tensor per level.
    """

    def __init__(self, n: int, H: int, d: int):
        if n < 1:
            raise EmptyInputError("a chart needs at least one token")
        if H < 1:
            raise ContractError(f"maximum height must be >= 1, got {H}")
        if d < 1:
            raise ContractError(f"dimension must be >= 1, got {d}")
        self.n = n
        self.H = min(H, n)
        self.requested_H = H
        self.d = d
        self.size = cell_count(n, self.H)
        self.values = np.zeros((self.size, d))
        self.occupied = np.zeros(self.size, dtype=bool)
        self.nodes: list[Tensor | None] = [None] * self.size
        self._levels: dict[int, tuple[Tensor, int]] = {}
        # attention weights over splits, keyed by span
        self.weights: dict[Span, np.ndarray] = {}

    # -- indexing ---------------------------------------------------------
    def offset(self, h: int, i: int) -> int:
        if not 1 <= h <= self.H:
            raise ContractError(f"length {h} outside 1..{self.H}")
        if not 0 <= i <= self.n - h:
            raise ContractError(f"start {i} invalid for length {h} in n={self.n}")
        return level_offset(self.n, h) + i

    def span_offset(self, span: Span) -> int:
        i, j = span
        if not 0 <= i <= j < self.n:
            raise ContractError(f"span {tuple(span)} outside sequence of length {self.n}")
        return self.offset(j - i + 1, i)

    def cells_of_length(self, h: int) -> list[Span]:
        if not 1 <= h <= self.H:
            raise ContractError(f"length {h} outside 1..{self.H}")
        return spans_of_length(self.n, h)

    def spans(self) -> list[Span]:
        return [s for h in range(1, self.H + 1) for s in spans_of_length(self.n, h)]

    # -- writes -----------------------------------------------------------
    def _check_ready(self, h: int, i: int) -> None:
        if h == 1:
            return
        lo = level_offset(self.n, 1)
        hi = level_offset(self.n, h)
        if not self.occupied[lo:hi].all():
            raise ContractError(f"cannot write length-{h} cell before all shorter cells exist")

    def write(self, span: Span, vector: Tensor) -> None:
        span = Span(*span)
        k = self.span_offset(span)
        if vector.shape != (self.d,):
            raise ContractError(f"cell vector has shape {vector.shape}, expected ({self.d},)")
        self._check_ready(span.length, span.i)
        self.values[k] = vector.data
        self.nodes[k] = vector
        self.occupied[k] = True

    def write_level(self, h: int, block: Tensor, row0: int = 0) -> None:
        """Write all cells of length ``h`` from rows ``row0:row0+n-h+1`` of ``block``."""
        count = level_size(self.n, h)
        self._check_ready(h, 0)
        start = self.offset(h, 0)
        self.values[start:start + count] = block.data[row0:row0 + count]
        self.occupied[start:start + count] = True
        self._levels[h] = (block, row0)

    # -- reads ------------------------------------------------------------
    @property
    def complete(self) -> bool:
        return bool(self.occupied.all())

    def vector(self, span: Span) -> np.ndarray:
        k = self.span_offset(Span(*span))
        if not self.occupied[k]:
            raise ContractError(f"cell {tuple(span)} has not been written")
        return self.values[k]

    def cell(self, span: Span) -> Tensor:
        """The cell as a tensor connected to the graph that produced it."""
        span = Span(*span)
        k = self.span_offset(span)
        if not self.occupied[k]:
            raise ContractError(f"cell {tuple(span)} has not been written")
        node = self.nodes[k]
        if node is not None:
            return node
        block, row0 = self._levels[span.length]
        return take_rows(block, [row0 + span.i]).reshape(self.d)

    def level(self, h: int) -> Tensor:
        """All cells of length ``h`` as an (n-h+1, d) tensor."""
        count = level_size(self.n, h)
        if h in self._levels:
            block, row0 = self._levels[h]
            if row0 == 0 and block.shape[0] == count:
                return block
            return take_rows(block, np.arange(row0, row0 + count))
        return stack([self.cell(s) for s in self.cells_of_length(h)])

    def flatten(self, lengths: Iterable[int] | None = None) -> list[tuple[Span, np.ndarray]]:
        """(span, vector) pairs ordered by length, then start index."""
        if not self.complete:
            raise ContractError("chart is incomplete")
        chosen = range(1, self.H + 1) if lengths is None else sorted(set(lengths))
        out = []
        for h in chosen:
            for s in self.cells_of_length(h):
                out.append((s, self.values[self.span_offset(s)]))
        return out

    def flatten_tensor(self, lengths: Iterable[int] | None = None) -> Tensor:
        if not self.complete:
            raise ContractError("chart is incomplete")
        chosen = range(1, self.H + 1) if lengths is None else sorted(set(lengths))
        return concat_rows([self.level(h) for h in chosen])

    def render(self, precision: int = 3, components: int = 2) -> str:
        """Plain-text dump, one row per length level, one column per start index."""
        rows = []
        for h in range(1, self.H + 1):
            cols = []
            for s in self.cells_of_length(h):
                if self.occupied[self.span_offset(s)]:
                    v = self.vector(s)[:components]
                    cols.append("[" + " ".join(f"{x:+.{precision}f}" for x in v) + "]")
                else:
                    cols.append("[ . ]")
            rows.append(f"h={h:<3d}" + " ".join(cols))
        return "\n".join(rows)


@dataclass
class LevelPlan:
    """Index bookkeeping for building many charts at once, level by level.

    The batched arena stores level 1 for every sequence, then level 2 for
    every sequence, and so on.  Within a level, sequences appear in batch
    order and spans in start order.  Sequences shorter than ``h`` simply
    contribute no rows at level ``h``.
    """

    lengths: np.ndarray
    H: int

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.intp)
        if self.lengths.size == 0 or self.lengths.min() < 1:
            raise EmptyInputError("every sequence needs at least one token")
        if self.H < 1:
            raise ContractError(f"maximum height must be >= 1, got {self.H}")
        self.top = int(min(self.H, self.lengths.max()))
        self.level_counts = [np.maximum(self.lengths - h + 1, 0) for h in range(1, self.top + 1)]
        # start row of each (level, sequence) block in the arena
        self.level_starts = []
        base = 0
        for counts in self.level_counts:
            starts = base + np.concatenate([[0], np.cumsum(counts)[:-1]])
            self.level_starts.append(starts)
            base += int(counts.sum())
        self.total = base

    def row(self, b: int, h: int, i: int) -> int:
        return int(self.level_starts[h - 1][b]) + i

    def level_rows(self, h: int) -> tuple[int, int]:
        start = int(self.level_starts[h - 1][0])
        return start, start + int(self.level_counts[h - 1].sum())

    def split_indices(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Arena rows of the left and right children for every split at level ``h``.

        Rows are ordered span-major (batch, then start), split point ascending
        inside each span.  Also returns the batch index of each span.
        """
        counts = self.level_counts[h - 1]
        S = int(counts.sum())
        owner = np.repeat(np.arange(len(counts)), counts)
        first = np.concatenate([[0], np.cumsum(counts)[:-1]])
        start = np.arange(S) - np.repeat(first, counts)
        left_len = np.arange(1, h)
        starts = np.stack(self.level_starts[:h - 1])  # [h-1, B]
        left = starts[left_len - 1][:, owner].T + start[:, None]
        right = starts[h - left_len - 1][:, owner].T + start[:, None] + left_len[None, :]
        return left.reshape(-1).astype(np.intp), right.reshape(-1).astype(np.intp), owner

    def memory_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded (batch, max cells) arena row index plus validity mask.

        Each row lists one sequence's cells by length then start index,
        matching :meth:`SpanChart.flatten`.
        """
        per_seq = [cell_count(int(n), self.H) for n in self.lengths]
        width = max(per_seq)
        index = np.zeros((len(self.lengths), width), dtype=np.intp)
        mask = np.zeros((len(self.lengths), width), dtype=bool)
        for b, n in enumerate(self.lengths):
            rows = [self.row(b, h, i) for h in range(1, min(self.H, n) + 1) for i in range(n - h + 1)]
            index[b, :len(rows)] = rows
            mask[b, :len(rows)] = True
        return index, mask

    def top_rows(self) -> list[np.ndarray]:
        """Arena rows of each sequence's longest materialised level."""
        out = []
        for b, n in enumerate(self.lengths):
            h = min(self.H, int(n))
            out.append(np.arange(self.row(b, h, 0), self.row(b, h, 0) + n - h + 1))
        return out

    def token_rows(self) -> list[np.ndarray]:
        return [np.arange(self.row(b, 1, 0), self.row(b, 1, 0) + int(n)) for b, n in enumerate(self.lengths)]


def chart_new(n: int, H: int, d: int) -> SpanChart:
    return SpanChart(n, H, d)


def gather_cells(arena: Tensor, rows: np.ndarray) -> Tensor:
    return take_rows(arena, rows)
