"""Closed-form chart costs and instrumented runs that must reproduce them exactly."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from treeformer import autodiff as ad
from treeformer.chart import cell_count, spans_of_length, split_pairs
from treeformer.encoder import EncodeOptions, OpCounters, TreeformerConfig, TreeformerParams, encode_levelwise
from treeformer.errors import ContractError, CounterMismatch

CSV_HEADER = ("n", "H", "compositions", "pool_candidates", "cells", "level_steps", "wall_ms", "chart_bytes")


def compositions_closed_form(n: int) -> int:
    """sum_{h=1..n} (n - h + 1)(h - 1), which equals (n + 1) n (n - 1) / 6."""
    if n < 1:
        raise ContractError("n must be >= 1")
    return sum((n - h + 1) * (h - 1) for h in range(1, n + 1))


def compositions_height_limited(n: int, H: int) -> int:
    if n < 1 or not 1 <= H <= n:
        raise ContractError(f"need n >= 1 and 1 <= H <= n, got n={n}, H={H}")
    return sum((n - h + 1) * (h - 1) for h in range(1, H + 1))


def compositions_enumerated(n: int, H: int | None = None) -> int:
    """Count (span, split) pairs by walking the chart."""
    top = n if H is None else min(H, n)
    return sum(len(split_pairs(s)) for h in range(2, top + 1) for s in spans_of_length(n, h))


@dataclass
class LevelWork:
    per_level: list[int]

    @property
    def total(self) -> int:
        return sum(self.per_level)


def parallel_work_per_level(n: int, H: int | None = None) -> LevelWork:
    """Critical-path compositions when each level runs fully in parallel.

    Level h contributes its h - 1 splits; with H = n the total is n(n-1)/2.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    top = n if H is None else min(H, n)
    return LevelWork([h - 1 for h in range(1, top + 1)])


@dataclass
class ProfileRow:
    n: int
    H: int
    compositions: int
    pool_candidates: int
    cells: int
    level_steps: int
    wall_ms: float
    chart_bytes: int


def chart_bytes(n: int, H: int, d: int, itemsize: int) -> int:
    return cell_count(n, H) * d * itemsize


def profile_point(n: int, H: int, d: int = 16, repeats: int = 5, seed: int = 0) -> ProfileRow:
    """Encode one random sequence; check counters, then time uninstrumented runs.

    Raises :class:`CounterMismatch` if any counter disagrees with its closed form.
    """
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    H = min(H, n)
    rng = np.random.default_rng(seed)
    config = TreeformerConfig(d=d, H=H, seed=seed)
    params = TreeformerParams.init(config, rng)
    tokens = [ad.Tensor(rng.normal(size=(n, d)))]
    counters = OpCounters()
    with ad.no_grad():
        chart = encode_levelwise(tokens, config, params, EncodeOptions(counters=counters))
        expected = {
            "compositions": compositions_height_limited(n, H),
            "pooling_candidate_total": compositions_height_limited(n, H),
            "cells_written": cell_count(n, H),
            "level_steps": len(parallel_work_per_level(n, H).per_level) - 1,
        }
        for name, want in expected.items():
            got = getattr(counters, name)
            if got != want:
                raise CounterMismatch(f"n={n} H={H}: {name} counted {got}, closed form {want}")
        itemsize = chart.levels[0].data.itemsize
        analytic = chart_bytes(n, H, d, itemsize)
        allocated = sum(level.data.nbytes for level in chart.levels)
        if allocated != analytic:
            raise CounterMismatch(f"n={n} H={H}: chart buffers hold {allocated} bytes, expected {analytic}")
        encode_levelwise(tokens, config, params)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            encode_levelwise(tokens, config, params)
            times.append((time.perf_counter() - t0) * 1000.0)
    return ProfileRow(n, H, counters.compositions, counters.pooling_candidate_total, counters.cells_written,
                      counters.level_steps, statistics.median(times), analytic)


def profile_run(points: Iterable[tuple[int, int]], d: int = 16, repeats: int = 5, seed: int = 0) -> list[ProfileRow]:
    points = list(points)
    if not points:
        raise ContractError("profile sweep is empty")
    return [profile_point(n, H, d, repeats, seed) for n, H in points]


def rows_to_csv(rows: Sequence[ProfileRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        vals = list(astuple(r))
        vals[6] = f"{r.wall_ms:.4f}"
        writer.writerow(vals)
    return buf.getvalue()


def read_csv(text: str) -> list[ProfileRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ContractError(f"unexpected profile header {reader.fieldnames}")
    types = {f.name: f.type for f in fields(ProfileRow)}
    out = []
    for rec in reader:
        out.append(ProfileRow(**{k: (float(v) if types[k] in (float, "float") else int(v)) for k, v in rec.items()}))
    return out


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)
    return float(slope)
