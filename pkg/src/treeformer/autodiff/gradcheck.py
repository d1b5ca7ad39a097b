"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from treeformer.autodiff.tensor import Tensor, backward, new_tape, no_grad, precision


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        out = []
        for name, err in self.errors.items():
            status = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{name}\t{err:.3e}\t{status}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, step: float,
                     max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of scalar ``f`` w.r.t. ``param``.

    With ``max_entries`` only a random subset of coordinates is probed; the
    returned index array says which.
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.zeros(idx.size)
    with no_grad():
        for slot, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + step
            up = float(f().data.astype(np.float64).sum())
            flat[k] = orig - step
            down = float(f().data.astype(np.float64).sum())
            flat[k] = orig
            out[slot] = (up - down) / (2.0 * step)
    return idx, out


def grad_check(f: Callable[[], Tensor], inputs: dict[str, Tensor], step: float = 1e-3,
               tolerance: float = 1e-3, max_entries: int | None = None, seed: int = 0,
               reference_dtype=None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` with central differences.

    ``f`` is called with no arguments and must rebuild its forward pass from
    the current contents of ``inputs``.  The report holds one relative error
    per named input.

    With ``reference_dtype`` the differences are taken with the inputs upcast
    to that dtype (same values), so a float32 backward pass is judged against
    a reference that is not itself dominated by float32 rounding.
    """
    for t in inputs.values():
        t.grad = None
    new_tape()
    loss = f()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in inputs.items()}
    for t in inputs.values():
        t.grad = None
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    saved = {name: t.data for name, t in inputs.items()}
    try:
        if reference_dtype is not None:
            for t in inputs.values():
                t.data = t.data.astype(reference_dtype)
        with precision(reference_dtype or saved_dtype(saved)):
            for name, t in inputs.items():
                idx, num = numeric_gradient(f, t, step, max_entries, rng)
                report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], num)
    finally:
        for name, t in inputs.items():
            t.data = saved[name]
    return report


def saved_dtype(arrays: dict[str, np.ndarray]):
    first = next(iter(arrays.values()), None)
    return np.float64 if first is None else first.dtype.type
