"""Token pre-encoding: embeddings, sinusoidal positions, L self-attention layers.

Layers are post-norm: ``x = LN(x + Attn(x)); x = LN(x + FFN(x))``.
With ``L = 0`` the chart consumes the position-augmented embeddings directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from treeformer import autodiff as ad
from treeformer.autodiff import Tensor
from treeformer.errors import ContractError
from treeformer.layers import FeedForward, LayerNorm, MultiHeadAttention, sinusoidal_positions


@dataclass
class PreEncoderConfig:
    vocab_size: int
    d: int = 64
    L: int = 1
    n_heads: int = 4
    d_ffn: int = 128
    dropout: float = 0.0
    positional: bool = True

    def __post_init__(self):
        if self.L < 0:
            raise ContractError(f"L must be >= 0, got {self.L}")
        if self.d % self.n_heads:
            raise ContractError(f"d={self.d} is not divisible by n_heads={self.n_heads}")


class EncoderLayer:
    def __init__(self, rng, config: PreEncoderConfig, name: str):
        self.attn = MultiHeadAttention(rng, config.d, config.n_heads, f"{name}.attn")
        self.norm1 = LayerNorm(config.d, f"{name}.norm1")
        self.ffn = FeedForward(rng, config.d, config.d_ffn, f"{name}.ffn")
        self.norm2 = LayerNorm(config.d, f"{name}.norm2")
        self.dropout = config.dropout

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in (self.attn, self.norm1, self.ffn, self.norm2):
            out.update(part.named_parameters())
        return out

    def __call__(self, x: Tensor, key_mask=None, training=False, rng=None) -> Tensor:
        a = ad.dropout(self.attn(x, x, key_mask), self.dropout, rng, training)
        x = self.norm1(ad.add(x, a))
        f = ad.dropout(self.ffn(x), self.dropout, rng, training)
        return self.norm2(ad.add(x, f))


class PreEncoder:
    def __init__(self, config: PreEncoderConfig, rng: np.random.Generator):
        self.config = config
        # embeddings have no fan-in; unit-range uniform keeps them on the scale of the positional table
        self.embedding = ad.parameter(rng.uniform(-1.0, 1.0, size=(config.vocab_size, config.d)), "embed")
        self.layers = [EncoderLayer(rng, config, f"layers.{i}") for i in range(config.L)]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embedding}
        for layer in self.layers:
            out.update(layer.named_parameters())
        return out

    def embed(self, ids: np.ndarray) -> Tensor:
        """(B, n) ids -> (B, n, d) embeddings plus positions."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.intp))
        V = self.config.vocab_size
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise IndexError(f"token id out of range for vocab {V}")
        B, n = ids.shape
        x = ad.take_rows(self.embedding, ids.reshape(-1)).reshape(B, n, self.config.d)
        if self.config.positional:
            x = ad.add_const(x, sinusoidal_positions(n, self.config.d)[None])
        return x

    def __call__(self, ids, lengths=None, training=False, rng=None) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.intp))
        B, n = ids.shape
        lengths = np.full(B, n) if lengths is None else np.asarray(lengths)
        key_mask = np.arange(n)[None, :] < lengths[:, None]
        x = ad.dropout(self.embed(ids), self.config.dropout, rng, training)
        for layer in self.layers:
            x = layer(x, key_mask, training, rng)
        return x

    def token_rows(self, x: Tensor, lengths) -> Tensor:
        """Concatenate the unpadded positions of (B, n, d) into (sum lengths, d)."""
        B, n, d = x.shape
        rows = np.concatenate([b * n + np.arange(int(L)) for b, L in enumerate(lengths)])
        return ad.take_rows(x.reshape(B * n, d), rows)


def pre_encode(token_ids, encoder: PreEncoder) -> Tensor:
    """Single sequence: ids -> (n, d) contextual token vectors (eval mode)."""
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.size == 0:
        raise ContractError("cannot pre-encode an empty sequence")
    x = encoder(ids[None, :])
    return x.reshape(ids.size, encoder.config.d)
