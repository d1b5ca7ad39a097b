"""Full networks: pre-encoder -> chart encoder -> classifier or decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from treeformer import autodiff as ad
from treeformer.autodiff import Tensor
from treeformer.encoder import (
    BatchedChart,
    EncodeOptions,
    OpCounters,
    TreeformerConfig,
    TreeformerParams,
    encode_levelwise,
    encode_sequential,
)
from treeformer.errors import ContractError
from treeformer.preencoder import PreEncoder, PreEncoderConfig
from treeformer.seq2seq import (
    ClassifierHead,
    Decoder,
    DecoderConfig,
    EncoderMemory,
    classify,
    decode_train_step,
    generate_beam,
    generate_greedy,
)


@dataclass
class ModelConfig:
    head: str = "classify"  # "classify" | "seq2seq"
    vocab_size: int = 7
    n_classes: int = 2
    d: int = 64
    H: int = 6
    L: int = 1
    L_dec: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    dropout: float = 0.0
    compose_bias: bool = True
    learned_qk: bool = True
    activation: str = "none"
    positional: bool = True
    use_summary: bool = True
    max_output_length: int = 32
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.head not in ("classify", "seq2seq"):
            raise ContractError(f"unknown head {self.head!r}")

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def tree_config(self) -> TreeformerConfig:
        return TreeformerConfig(d=self.d, H=self.H, dropout=self.dropout, seed=self.seed,
                                compose_bias=self.compose_bias, learned_qk=self.learned_qk,
                                activation=self.activation)


class TreeformerModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.pre = PreEncoder(PreEncoderConfig(vocab_size=config.vocab_size, d=config.d, L=config.L,
                                               n_heads=config.n_heads, d_ffn=config.d_ffn,
                                               dropout=config.dropout, positional=config.positional), rng)
        self.tree_config = config.tree_config()
        self.tree = TreeformerParams.init(self.tree_config, rng)
        if config.head == "classify":
            self.head = ClassifierHead(rng, config.d, config.n_classes, config.use_summary)
            self.decoder = None
        else:
            self.head = None
            self.decoder = Decoder(DecoderConfig(vocab_size=config.vocab_size, d=config.d, L_dec=config.L_dec,
                                                 n_heads=config.n_heads, d_ffn=config.d_ffn,
                                                 dropout=config.dropout,
                                                 max_output_length=config.max_output_length,
                                                 label_smoothing=config.label_smoothing), rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"pre.{k}": v for k, v in self.pre.named_parameters().items()}
        out.update({f"tree.{k}": v for k, v in self.tree.named_parameters().items()})
        if self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.named_parameters().items()})
        if self.decoder is not None:
            out.update({f"dec.{k}": v for k, v in self.decoder.named_parameters().items()})
        return out

    # -- forward ------------------------------------------------------------
    def encode(self, ids, lengths, training: bool = False, rng=None, counters: OpCounters | None = None,
               keep_weights: bool = False) -> BatchedChart:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.intp))
        lengths = np.asarray(lengths)
        x = self.pre(ids, lengths, training, rng)
        tokens = self.pre.token_rows(x, lengths)
        opts = EncodeOptions(training=training, rng=rng, counters=counters, keep_weights=keep_weights,
                             activation=self.tree_config.activation, dropout=self.tree_config.dropout)
        return encode_levelwise(tokens, self.tree_config, self.tree, opts, lengths=lengths)

    def encode_sequential(self, ids, keep_weights: bool = False):
        """One sequence through the cell-by-cell schedule (eval mode)."""
        ids = np.asarray(ids, dtype=np.intp)
        x = self.pre(ids[None, :]).reshape(ids.size, self.config.d)
        opts = EncodeOptions(keep_weights=keep_weights, activation=self.tree_config.activation)
        return encode_sequential(x, self.tree_config, self.tree, opts)

    def memory(self, chart: BatchedChart) -> EncoderMemory:
        vectors, mask = chart.memory()
        return EncoderMemory(vectors, mask)

    def class_logits(self, ids, lengths, training=False, rng=None) -> Tensor:
        if self.head is None:
            raise ContractError("model has no classification head")
        return classify(self.encode(ids, lengths, training, rng), self.head)

    def loss(self, batch, training: bool = False, rng=None) -> Tensor:
        if self.head is not None:
            logits = self.class_logits(batch.source, batch.lengths, training, rng)
            return ad.cross_entropy(logits, batch.labels, self.config.label_smoothing if training else 0.0)
        chart = self.encode(batch.source, batch.lengths, training, rng)
        return decode_train_step(self.memory(chart), batch.targets, self.decoder, training, rng,
                                 self.config.label_smoothing)

    # -- inference ----------------------------------------------------------
    def predict_classes(self, ids, lengths) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.class_logits(ids, lengths).data, axis=-1)

    def generate(self, ids, lengths, beam_size: int | None = None, length_penalty: float = 0.0) -> list[list[int]]:
        """Greedy decoding when ``beam_size`` is None, beam search otherwise."""
        with ad.no_grad():
            memory = self.memory(self.encode(ids, lengths))
        outs = []
        for b in range(len(lengths)):
            if beam_size is None:
                outs.append(generate_greedy(memory, self.decoder, b))
            else:
                outs.append(generate_beam(memory, self.decoder, beam_size, length_penalty, b))
        return outs

    def config_dict(self) -> dict:
        return asdict(self.config)
