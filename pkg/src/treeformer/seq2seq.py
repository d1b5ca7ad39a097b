"""Decoder over flattened chart cells, beam search, and a classification readout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from treeformer import autodiff as ad
from treeformer.autodiff import Tensor
from treeformer.chart import Span, SpanChart, cell_count
from treeformer.errors import ContractError
from treeformer.layers import FeedForward, LayerNorm, Linear, MultiHeadAttention, sinusoidal_positions

PAD, BOS, EOS = 0, 1, 2


@dataclass
class DecoderConfig:
    vocab_size: int
    d: int = 64
    L_dec: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    dropout: float = 0.0
    max_output_length: int = 32
    beam_size: int = 1
    length_penalty: float = 0.0
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.beam_size < 1:
            raise ContractError("beam_size must be >= 1")
        if self.max_output_length < 1:
            raise ContractError("max_output_length must be >= 1")


@dataclass
class EncoderMemory:
    """Chart cells laid out per sequence (tokens first, then longer spans).

    ``vectors`` is (B, m_max, d); ``mask`` marks real cells; ``spans`` lists
    the span of every real cell.
    """

    vectors: Tensor
    mask: np.ndarray
    spans: list[list[Span]] = field(default_factory=list)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def select(self, b: int, copies: int = 1) -> "EncoderMemory":
        """Memory of sequence ``b`` repeated ``copies`` times (no gradient)."""
        m = int(self.mask[b].sum())
        vec = self.vectors.data[b, :m]
        return EncoderMemory(Tensor(np.repeat(vec[None], copies, axis=0), dtype=vec.dtype),
                             np.ones((copies, m), dtype=bool),
                             [self.spans[b]] * copies if self.spans else [])

    @classmethod
    def from_charts(cls, charts: Sequence[SpanChart]) -> "EncoderMemory":
        blocks = [c.flatten_tensor() for c in charts]
        width = max(b.shape[0] for b in blocks)
        d = blocks[0].shape[1]
        mask = np.zeros((len(blocks), width), dtype=bool)
        padded = []
        for k, blk in enumerate(blocks):
            m = blk.shape[0]
            mask[k, :m] = True
            if m < width:
                blk = ad.concat_rows([blk, Tensor(np.zeros((width - m, d)), dtype=blk.data.dtype)])
            padded.append(blk)
        vectors = ad.stack(padded)
        spans = [[s for s, _ in c.flatten()] for c in charts]
        for c, s in zip(charts, spans):
            if len(s) != cell_count(c.n, c.H):
                raise ContractError("memory length does not match the chart cell count")
        return cls(vectors, mask, spans)


class DecoderLayer:
    def __init__(self, rng, config: DecoderConfig, name: str):
        d = config.d
        self.self_attn = MultiHeadAttention(rng, d, config.n_heads, f"{name}.self_attn")
        self.norm1 = LayerNorm(d, f"{name}.norm1")
        self.cross_attn = MultiHeadAttention(rng, d, config.n_heads, f"{name}.cross_attn")
        self.norm2 = LayerNorm(d, f"{name}.norm2")
        self.ffn = FeedForward(rng, d, config.d_ffn, f"{name}.ffn")
        self.norm3 = LayerNorm(d, f"{name}.norm3")
        self.dropout = config.dropout

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in (self.self_attn, self.norm1, self.cross_attn, self.norm2, self.ffn, self.norm3):
            out.update(part.named_parameters())
        return out

    def __call__(self, y, tgt_mask, memory, mem_mask, training=False, rng=None):
        a = ad.dropout(self.self_attn(y, y, tgt_mask, causal=True), self.dropout, rng, training)
        y = self.norm1(ad.add(y, a))
        c = ad.dropout(self.cross_attn(y, memory, mem_mask), self.dropout, rng, training)
        y = self.norm2(ad.add(y, c))
        f = ad.dropout(self.ffn(y), self.dropout, rng, training)
        return self.norm3(ad.add(y, f))


class Decoder:
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        self.embedding = ad.parameter(rng.uniform(-1.0, 1.0, size=(config.vocab_size, config.d)), "embed")
        self.layers = [DecoderLayer(rng, config, f"layers.{i}") for i in range(config.L_dec)]
        self.out = Linear(rng, config.d, config.vocab_size, "out")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embedding}
        for layer in self.layers:
            out.update(layer.named_parameters())
        out.update(self.out.named_parameters())
        return out

    def logits(self, memory: EncoderMemory, inputs, input_lengths=None, training=False, rng=None) -> Tensor:
        """Teacher-forced logits (B, T, V) for decoder inputs (B, T)."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.intp))
        B, T = inputs.shape
        if memory.vectors.shape[0] != B:
            raise ContractError(f"memory batch {memory.vectors.shape[0]} != target batch {B}")
        lengths = np.full(B, T) if input_lengths is None else np.asarray(input_lengths)
        tgt_mask = np.arange(T)[None, :] < lengths[:, None]
        d = self.config.d
        y = ad.take_rows(self.embedding, inputs.reshape(-1)).reshape(B, T, d)
        y = ad.add_const(y, sinusoidal_positions(T, d)[None])
        y = ad.dropout(y, self.config.dropout, rng, training)
        for layer in self.layers:
            y = layer(y, tgt_mask, memory.vectors, memory.mask, training, rng)
        return self.out(y)

    def step_log_probs(self, memory: EncoderMemory, prefixes: list[list[int]]) -> np.ndarray:
        """Log-probabilities of the next token after each prefix (all the same length)."""
        with ad.no_grad():
            logits = self.logits(memory, np.asarray(prefixes))
            return ad.log_softmax_last(logits).data[:, -1, :].astype(np.float64)


def _pad_targets(target_ids: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(t) for t in target_ids])
    out = np.full((len(target_ids), lengths.max()), PAD, dtype=np.intp)
    for b, t in enumerate(target_ids):
        out[b, :len(t)] = t
    return out, lengths


def decode_train_step(memory: EncoderMemory, target_ids: Sequence[Sequence[int]], decoder: Decoder,
                      training: bool = False, rng=None, label_smoothing: float | None = None) -> Tensor:
    """Teacher-forced loss.  Each target is ``[BOS, y_1, ..., y_T, EOS]``;
    the decoder reads all but the last id and predicts all but the first."""
    cfg = decoder.config
    for t in target_ids:
        if len(t) < 2:
            raise ContractError("a target needs at least one predicted token")
        if len(t) - 1 > cfg.max_output_length:
            raise ContractError(f"target of {len(t) - 1} tokens exceeds max_output_length={cfg.max_output_length}")
    full, lengths = _pad_targets(target_ids)
    inputs, labels = full[:, :-1], full[:, 1:]
    steps = lengths - 1
    logits = decoder.logits(memory, inputs, steps, training, rng)
    B, T, V = logits.shape
    weights = (np.arange(T)[None, :] < steps[:, None]).astype(np.float64)
    smoothing = cfg.label_smoothing if label_smoothing is None else label_smoothing
    return ad.cross_entropy(logits.reshape(B * T, V), labels.reshape(-1), smoothing, weights.reshape(-1))


# ---------------------------------------------------------------------------
# search


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    score: float


StepFn = Callable[[list[list[int]]], np.ndarray]


def normalized_score(log_prob: float, length: int, length_penalty: float) -> float:
    return log_prob / (max(length, 1) ** length_penalty)


def beam_search(step_fn: StepFn, beam_size: int, length_penalty: float, max_length: int,
                bos: int = BOS, eos: int = EOS) -> tuple[Hypothesis, list[Hypothesis]]:
    """Length-normalised beam search.

    At every step each live prefix is extended by its ``beam_size`` best
    tokens and the ``beam_size`` best extensions overall survive.  Extensions
    ending in ``eos`` retire to the finished pool; search stops once the pool
    holds ``beam_size`` hypotheses or ``max_length`` tokens were generated,
    at which point unfinished prefixes are retired as they stand.  Returns the
    best finished hypothesis by ``log_prob / len**length_penalty`` and the pool.
    """
    if beam_size < 1:
        raise ContractError("beam_size must be >= 1")
    alive: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_length):
        logp = step_fn([p for p, _ in alive])
        cands = []
        for a, (prefix, score) in enumerate(alive):
            order = np.argsort(-logp[a], kind="stable")[:beam_size]
            for tok in order:
                cands.append((score + float(logp[a, tok]), prefix + [int(tok)]))
        cands.sort(key=lambda c: -c[0])
        alive = []
        for score, seq in cands[:beam_size]:
            if seq[-1] == eos:
                gen = seq[1:]
                finished.append(Hypothesis(gen, score, normalized_score(score, len(gen), length_penalty)))
            else:
                alive.append((seq, score))
        if len(finished) >= beam_size or not alive:
            break
    else:
        for seq, score in alive:
            gen = seq[1:]
            finished.append(Hypothesis(gen, score, normalized_score(score, len(gen), length_penalty)))
    best = max(finished, key=lambda h: h.score)
    return best, finished


def greedy_search(step_fn: StepFn, max_length: int, bos: int = BOS, eos: int = EOS) -> list[int]:
    seq = [bos]
    for _ in range(max_length):
        tok = int(np.argmax(step_fn([seq])[0]))
        seq.append(tok)
        if tok == eos:
            break
    return seq[1:]


def strip_special(tokens: Sequence[int]) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        if t not in (PAD, BOS):
            out.append(t)
    return out


def generate_greedy(memory: EncoderMemory, decoder: Decoder, index: int = 0) -> list[int]:
    single = memory.select(index)
    return greedy_search(lambda prefixes: decoder.step_log_probs(single, prefixes),
                         decoder.config.max_output_length)


def generate_beam(memory: EncoderMemory, decoder: Decoder, beam_size: int, length_penalty: float,
                  index: int = 0) -> list[int]:
    cache: dict[int, EncoderMemory] = {}

    def step(prefixes):
        k = len(prefixes)
        if k not in cache:
            cache[k] = memory.select(index, k)
        return decoder.step_log_probs(cache[k], prefixes)

    best, _ = beam_search(step, beam_size, length_penalty, decoder.config.max_output_length)
    return best.tokens


# ---------------------------------------------------------------------------
# classification readout


class ClassifierHead:
    def __init__(self, rng, d: int, n_classes: int, use_summary: bool = True):
        self.proj = Linear(rng, d, n_classes, "proj")
        self.use_summary = use_summary

    def named_parameters(self) -> dict[str, Tensor]:
        return self.proj.named_parameters()

    def __call__(self, token_mean: Tensor, summary: Tensor | None) -> Tensor:
        x = token_mean if (summary is None or not self.use_summary) else ad.add(token_mean, summary)
        return self.proj(x)


def classify(chart, head: ClassifierHead) -> Tensor:
    """Class logits from a :class:`SpanChart` (vector out) or a batched chart (B, C)."""
    from treeformer.encoder import BatchedChart, top_level_summary

    if isinstance(chart, BatchedChart):
        summary = chart.top_level_summary() if head.use_summary else None
        return head(chart.token_mean(), summary)
    tokens = ad.mean(chart.level(1), axis=0)
    summary = top_level_summary(chart) if head.use_summary else None
    return head(tokens, summary)
