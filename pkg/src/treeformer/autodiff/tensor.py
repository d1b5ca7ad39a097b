"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records its output on the calling thread's
current :class:`Tape`.  :func:`backward` walks that tape once, newest record
first, and deposits gradients on the leaf tensors reached from the loss.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from treeformer.errors import ContractError, DimensionError, GradientStateError, NumericError

_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _get(name, default):
    return getattr(_state, name, default)


# ---------------------------------------------------------------------------
# precision switch

_DEFAULT_DTYPE = np.float32


def get_dtype():
    return _get("dtype", _DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    """Set the floating dtype used for newly created tensors on this thread."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    previous = get_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of the primitive outputs produced during a forward pass."""

    def __init__(self) -> None:
        self.records: list[Tensor] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        self._previous = _get("tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous


def current_tape() -> Tape:
    tape = _get("tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def new_tape() -> Tape:
    """Discard whatever the current thread recorded and start over."""
    _state.tape = Tape()
    return _state.tape


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=like.data.dtype), like.shape).copy())


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    result = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = tuple(parents)
        result._backward = backward_fn
        tape = current_tape()
        result._tape = tape
        tape.records.append(result)
    return result


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaves must have had their grads reset (``grad is None``) since the last
    pass; a second call on the same loss is rejected because its tape has
    already been consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss.is_leaf:
        if loss.grad is not None:
            raise GradientStateError("grad of leaf loss was not reset before backward()")
        loss.grad = np.ones_like(loss.data)
        return
    tape = loss._tape
    if tape is None or tape.consumed:
        raise GradientStateError("backward() already ran for this graph; rebuild the forward pass")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: set[int] = set()
    for node in reversed(tape.records):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"internal: gradient shape {pg.shape} does not match input shape {parent.shape}"
                )
            if parent.is_leaf:
                key = id(parent)
                if key not in touched:
                    if parent.grad is not None:
                        raise GradientStateError(
                            f"grad of {parent!r} was not reset before backward()"
                        )
                    touched.add(key)
                    parent.grad = pg.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
    tape.consumed = True
    tape.records.clear()


# ---------------------------------------------------------------------------
# elementwise


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not aligned")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum.  ``b`` may match a trailing suffix of ``a``'s shape (bias add)."""
    _check_suffix(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def add_const(a: Tensor, const) -> Tensor:
    """Add a non-differentiable array (mask, positional table); it is broadcast explicitly."""
    const = np.broadcast_to(np.asarray(const, dtype=a.data.dtype), a.shape)
    return _record(a.data + const, (a,), lambda g: (g,))


def mul_const(a: Tensor, const) -> Tensor:
    const = np.broadcast_to(np.asarray(const, dtype=a.data.dtype), a.shape)
    return _record(a.data * const, (a,), lambda g: (g * const,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul_const(a, keep)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def transpose_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat_last(*tensors: Tensor) -> Tensor:
    """Concatenate along the last axis; all leading extents must agree."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading shapes differ: {tensors[0].shape} vs {t.shape}"
            )
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in tensors], axis=-1)

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _record(out, tensors, back)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    src = a.shape

    def back(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _record(a.data[..., start:stop], (a,), back)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    tensors = tuple(tensors)
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise DimensionError(f"concat_rows: trailing shapes differ: {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _record(out, tuple(tensors), lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"stack: shapes differ: {shape} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=0)
    return _record(out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


def scatter_rows(index: np.ndarray, values: np.ndarray, shape) -> np.ndarray:
    """Sum ``values`` rows into a zero array of ``shape`` at ``index`` (fixed order)."""
    full = np.zeros(shape, dtype=values.dtype)
    if index.size == 0:
        return full
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    if starts.size == index.size:
        full[index] = values
    else:
        full[sorted_idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return full


def take_rows(a: Tensor, index) -> Tensor:
    """Gather ``a[index]`` along axis 0; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")
    src_shape = a.shape

    def back(g):
        return (scatter_rows(index.reshape(-1), g.reshape((-1,) + src_shape[1:]), src_shape),)

    return _record(a.data[index], (a,), back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared by every leading index of ``a`` or
    carries exactly the same leading extents as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    shared_b = b.ndim == 2 and a.ndim > 2
    shared_a = a.ndim == 2 and b.ndim > 2

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if shared_b:
            gb = gb.reshape((-1,) + bd.shape).sum(axis=0)
        if shared_a:
            ga = ga.reshape((-1,) + ad.shape).sum(axis=0)
        return ga, gb

    return _record(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, parents, back)


# ---------------------------------------------------------------------------
# normalisation and probabilities


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax_last: empty last axis")
    _check_finite(x.data, "softmax_last")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), back)


def masked_softmax_last(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is true.

    Every row must keep at least one position.
    """
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax_last: a row has no admissible position")
    _check_finite(x.data, "masked_softmax_last")
    filled = np.where(mask, x.data, -np.inf)
    shifted = filled - filled.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), back)


def log_softmax_last(x: Tensor) -> Tensor:
    _check_finite(x.data, "log_softmax_last")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gxhat = g * gain.data
        gx = inv / d * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _record(out.astype(x.data.dtype), (x, gain, bias), back)


def cross_entropy(logits: Tensor, targets, label_smoothing: float = 0.0, weights=None) -> Tensor:
    """Mean label-smoothed negative log-likelihood over rows of ``logits``.

    ``weights`` (optional, per row) lets padded rows drop out; the mean is
    taken over the total weight.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: expects [batch, vocab] logits, got {logits.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    batch, vocab = logits.shape
    if targets.shape[0] != batch:
        raise DimensionError(f"cross_entropy: {targets.shape[0]} targets for {batch} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: target index out of range for vocab {vocab}")
    w = np.ones(batch) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: no rows carry weight")
    logp = log_softmax_last(logits)
    # build the smoothed target distribution as a constant and reduce with it
    dist = np.full((batch, vocab), label_smoothing / vocab)
    dist[np.arange(batch), targets] += 1.0 - label_smoothing
    coeff = -(dist * (w / total)[:, None]).astype(logits.data.dtype)
    return sum_(mul_const(logp, coeff))
