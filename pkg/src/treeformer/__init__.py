"""Chart encoder that composes token vectors into phrase vectors, with a small
numpy autodiff core, training harness and cost profiler."""

from treeformer.chart import LevelPlan, Span, SpanChart
from treeformer.encoder import (
    OpCounters,
    TreeformerConfig,
    TreeformerParams,
    compose,
    encode_levelwise,
    encode_sequential,
    pool,
)
from treeformer.model import ModelConfig, TreeformerModel

__version__ = "0.1.0"
