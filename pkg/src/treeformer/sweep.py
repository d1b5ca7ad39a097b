"""One training run per hyperparameter value, and a shape check on the curve."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from treeformer.config import RunConfig
from treeformer.errors import ConfigError
from treeformer.train import train

AXES = {"height": "H", "depth": "L"}


@dataclass
class SweepRow:
    axis: str
    value: int
    metric: float
    best_step: int
    checkpoint: str


def run_sweep(axis: str, values: Sequence[int], base: RunConfig, train_examples, valid_examples,
              vocab_size: int, out_dir: Path) -> list[SweepRow]:
    if axis not in AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        run = dataclasses.replace(base, **{AXES[axis]: int(value)})
        ckpt = out_dir / f"{axis}-{value}.ckpt"
        result = train(run, train_examples, valid_examples, vocab_size, ckpt, out_dir / f"{axis}-{value}.log")
        rows.append(SweepRow(axis, int(value), result.best_metric, result.best_step, str(ckpt)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["axis", "value", "metric", "best_step", "checkpoint"])
    for r in rows:
        writer.writerow([r.axis, r.value, f"{r.metric:.6f}", r.best_step, r.checkpoint])
    return buf.getvalue()


def curve_shape(metrics: Sequence[float], tol: float = 0.02) -> str:
    """Classify a metric-vs-value curve.

    ``"monotone-then-plateau-or-dip"``: the peak is not at the first value,
    the curve never falls by more than ``tol`` on the way up, and after the
    peak it either stays within ``tol`` of it or drops.  A peak at the last
    value counts only if its predecessor is within ``tol`` (a plateau).
    Anything else is ``"rising"`` (still climbing at the end), ``"flat"``
    or ``"irregular"``.
    """
    m = np.asarray(metrics, dtype=float)
    if m.size < 2:
        return "flat"
    peak = int(np.argmax(m))
    if m.max() - m.min() <= tol:
        return "flat"
    if peak == 0:
        return "irregular"
    climb = np.diff(m[:peak + 1])
    if (climb < -tol).any():
        return "irregular"
    if peak == m.size - 1 and m[peak] - m[peak - 1] > tol:
        return "rising"
    return "monotone-then-plateau-or-dip"
