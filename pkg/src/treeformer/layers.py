"""Transformer building blocks shared by the pre-encoder and the decoder."""

from __future__ import annotations

import math

import numpy as np

from treeformer import autodiff as ad
from treeformer.autodiff import Tensor
from treeformer.encoder import uniform_init
from treeformer.errors import ContractError


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, name: str, bias: bool = True):
        self.weight = ad.parameter(uniform_init(rng, (d_out, d_in), d_in), f"{name}.weight")
        self.bias = ad.parameter(np.zeros(d_out), f"{name}.bias") if bias else None
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out


class LayerNorm:
    def __init__(self, d: int, name: str):
        self.gain = ad.parameter(np.ones(d), f"{name}.gain")
        self.bias = ad.parameter(np.zeros(d), f"{name}.bias")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.gain": self.gain, f"{self.name}.bias": self.bias}


class MultiHeadAttention:
    def __init__(self, rng, d: int, n_heads: int, name: str):
        if d % n_heads:
            raise ContractError(f"d={d} is not divisible by n_heads={n_heads}")
        self.d, self.n_heads = d, n_heads
        self.q = Linear(rng, d, d, f"{name}.q")
        # A key bias adds the same score to every key, so softmax cancels it.
        self.k = Linear(rng, d, d, f"{name}.k", bias=False)
        self.v = Linear(rng, d, d, f"{name}.v")
        self.o = Linear(rng, d, d, f"{name}.o")
        self.last_probs: np.ndarray | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for lin in (self.q, self.k, self.v, self.o):
            out.update(lin.named_parameters())
        return out

    def _split(self, x: Tensor) -> Tensor:
        B, n, _ = x.shape
        dh = self.d // self.n_heads
        return ad.permute(x.reshape(B, n, self.n_heads, dh), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, key_mask: np.ndarray | None = None,
                 causal: bool = False) -> Tensor:
        """``query`` (B, nq, d) attends over ``memory`` (B, nk, d).

        ``key_mask`` (B, nk) marks real keys; ``causal`` hides later positions.
        """
        B, nq, d = query.shape
        nk = memory.shape[1]
        dh = d // self.n_heads
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = ad.matmul(q, ad.transpose_last(k)) * (1.0 / math.sqrt(dh))
        allowed = np.ones((B, 1, nq, nk), dtype=bool)
        if key_mask is not None:
            allowed = allowed & np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            allowed = allowed & np.tril(np.ones((nq, nk), dtype=bool))[None, None]
        # query rows that are themselves padding may have no admissible key; let them see key 0
        allowed = allowed | (~allowed.any(axis=-1, keepdims=True) & (np.arange(nk) == 0))
        probs = ad.masked_softmax_last(scores, np.broadcast_to(allowed, scores.shape))
        self.last_probs = probs.data
        ctx = ad.permute(ad.matmul(probs, v), (0, 2, 1, 3)).reshape(B, nq, d)
        return self.o(ctx)


class FeedForward:
    def __init__(self, rng, d: int, d_ffn: int, name: str):
        self.up = Linear(rng, d, d_ffn, f"{name}.up")
        self.down = Linear(rng, d_ffn, d, f"{name}.down")

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.relu(self.up(x)))

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.up.named_parameters(), **self.down.named_parameters()}
