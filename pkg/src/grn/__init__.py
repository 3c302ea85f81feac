"""Gated relation network sequence tagger built on a small numpy autodiff engine."""

from .corpus import Sentence, Vocab, build_vocab, convert_scheme, encode_batch, parse_conll, read_conll
from .metrics import LabeledSpan, extract_spans, span_prf
from .model import GRNTagger, ModelConfig, parameter_count
from .numcore import Graph, Node, parameter
from .trainer import TrainConfig, load_checkpoint, lr_schedule, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Graph", "Node", "parameter",
    "Sentence", "Vocab", "build_vocab", "convert_scheme", "encode_batch", "parse_conll", "read_conll",
    "LabeledSpan", "extract_spans", "span_prf",
    "GRNTagger", "ModelConfig", "parameter_count",
    "TrainConfig", "load_checkpoint", "lr_schedule", "save_checkpoint", "train",
]
