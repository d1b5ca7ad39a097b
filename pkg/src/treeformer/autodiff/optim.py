"""Parameter updates: plain SGD and an Adam-style adaptive variant."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from treeformer.autodiff.tensor import Tensor
from treeformer.errors import ContractError, NumericError


@dataclass
class OptimConfig:
    kind: str = "adam"  # "sgd" | "adam"
    lr: float = 1e-3
    schedule: str = "constant"  # "constant" | "inverse_sqrt"
    warmup_steps: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 0.0


def learning_rate(config: OptimConfig, step: int) -> float:
    """Rate for the 1-based ``step``.

    ``inverse_sqrt`` ramps linearly over the warmup and then decays as
    ``lr * sqrt(warmup / step)``.
    """
    if config.schedule == "constant":
        if config.warmup_steps > 0 and step < config.warmup_steps:
            return config.lr * step / config.warmup_steps
        return config.lr
    if config.schedule == "inverse_sqrt":
        warmup = max(config.warmup_steps, 1)
        if step < warmup:
            return config.lr * step / warmup
        return config.lr * math.sqrt(warmup / step)
    raise ContractError(f"unknown schedule {config.schedule!r}")


class Optimizer:
    """Updates ``params`` in place from their ``grad`` fields, then clears them.

    A step whose gradients contain NaN or inf is refused with
    :class:`NumericError` before any parameter is touched.
    """

    def __init__(self, params: dict[str, Tensor] | list[Tensor], config: OptimConfig):
        if isinstance(params, dict):
            params = list(params.values())
        self.params = params
        self.config = config
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g is not None and g.shape != p.shape:
                raise ContractError(f"grad shape {g.shape} does not match parameter {p.shape}")
            if g is not None and not np.all(np.isfinite(g)):
                self.zero_grad()
                raise NumericError(f"non-finite gradient for {p.name or p!r}; step aborted")
        cfg = self.config
        if cfg.clip_norm > 0:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
            if total > cfg.clip_norm:
                factor = cfg.clip_norm / total
                grads = [None if g is None else g * factor for g in grads]
        self.step_count += 1
        lr = learning_rate(cfg, self.step_count)
        if cfg.kind == "sgd":
            for p, g in zip(self.params, grads):
                if g is None:
                    continue
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * p.data
                p.data -= (lr * g).astype(p.data.dtype)
        elif cfg.kind == "adam":
            t = self.step_count
            c1 = 1.0 - cfg.beta1 ** t
            c2 = 1.0 - cfg.beta2 ** t
            for p, g, m, v in zip(self.params, grads, self._m, self._v):
                if g is None:
                    continue
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
                if cfg.weight_decay:
                    update = update + cfg.weight_decay * p.data
                p.data -= (lr * update).astype(p.data.dtype)
        else:
            raise ContractError(f"unknown optimizer {cfg.kind!r}")
        self.zero_grad()
        return lr


def optimizer_step(params, config: OptimConfig, state: Optimizer | None = None) -> Optimizer:
    """One update of ``params`` using their current grads; returns the optimizer state."""
    opt = state or Optimizer(params, config)
    opt.step()
    return opt
