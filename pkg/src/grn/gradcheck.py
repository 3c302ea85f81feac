"""Central finite-difference checks for the full model loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import PAD, Sentence, build_vocab, encode_batch
from .model import GRNTagger, ModelConfig
from .numcore import Graph, Node
from .trainer import init_params

TOY_SENTENCES = [
    (["Anna", "met", "Bob", "in", "Rome"], ["B-PER", "O", "B-PER", "O", "B-LOC"]),
    (["New", "York", "is", "big"], ["B-LOC", "I-LOC", "O", "O"]),
    (["Bob", "Lee", "left"], ["B-PER", "I-PER", "O"]),
]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5,
                 index: list[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    it = index if index is not None else list(np.ndindex(arr.shape))
    for ix in it:
        old = arr[ix]
        arr[ix] = old + eps
        up = f()
        arr[ix] = old - eps
        down = f()
        arr[ix] = old
        out[ix] = (up - down) / (2 * eps)
    return out


TOY_CONFIG = ModelConfig(word_dim=8, char_dim=8, char_channels=8, context_channels=16, dropout=0.0)


def tie_margin(model: GRNTagger, batch) -> float:
    """Smallest gap between the winner and runner-up of any max that reaches the loss."""
    g = Graph()
    model.loss(g, batch, training=False)
    gaps = [np.inf]
    char_mask = batch.char_mask()
    for node in g.nodes:
        if node.name == "max_across":
            top2 = np.sort(np.stack([p.data for p in node.parents]), axis=0)[-2:]
            gaps.append((top2[1] - top2[0])[batch.mask].min())
        elif node.name == "max_over_time":
            x = np.where(char_mask[..., None], node.parents[0].data, -np.inf)
            top2 = np.sort(x, axis=-2)[..., -2:, :]
            # one-character words have no runner-up
            with np.errstate(invalid="ignore"):
                gap = np.where(np.isfinite(top2[..., 0, :]), top2[..., 1, :] - top2[..., 0, :], np.inf)
            gaps.append(gap[batch.mask].min())
    return float(min(gaps))


def toy_model(config: ModelConfig | None = None, seed: int = 0, dtype=np.float64, min_margin: float = 1e-3,
              max_tries: int = 100):
    """Reduced-width model (word 8, char 8, context 16) and a 3-sentence batch.

    Seeds ``seed, seed+1, ...`` are tried until every max operation separates
    its winner from the runner-up by ``min_margin``, so finite differences do
    not straddle a kink.
    """
    config = config or TOY_CONFIG
    sents = [Sentence(list(t), list(y)) for t, y in TOY_SENTENCES]
    vocab = build_vocab(sents, min_freq=1)
    batch = encode_batch(sents, vocab)
    for s in range(seed, seed + max_tries):
        rng = np.random.default_rng(s)
        params = init_params(config, len(vocab.word_to_id), len(vocab.char_to_id), len(vocab.label_to_id), rng,
                             dtype)
        # non-zero biases and transitions so their gradients are exercised at a generic point
        for name, p in params.items():
            if name.endswith("bias") or name == "crf.transitions":
                p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
        model = GRNTagger(config, params, vocab.id_to_label)
        if tie_margin(model, batch) > min_margin:
            return model, batch
    raise RuntimeError(f"no seed in [{seed}, {seed + max_tries}) keeps max ties {min_margin} apart")


@dataclass
class GroupResult:
    name: str
    worst: float
    size: int

    @property
    def ok(self) -> bool:
        return self.worst < 1e-4


def check_model(model: GRNTagger, batch, eps: float = 1e-5, floor: float = 1e-4,
                corrupt: Callable[[dict[str, Node]], None] | None = None) -> list[GroupResult]:
    """Compare backprop against central differences for every parameter group.

    ``corrupt`` may tamper with the analytic gradients (negative control).
    """
    def loss_value() -> float:
        return float(model.loss(Graph(), batch, training=False).data)

    for p in model.params.values():
        p.zero_grad()
    g = Graph()
    g.backward(model.loss(g, batch, training=False))
    if corrupt is not None:
        corrupt(model.params)
    results = []
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        index = list(np.ndindex(p.shape))
        if name.endswith("_embedding"):
            index = [ix for ix in index if ix[0] != PAD]  # frozen row
        numeric = numeric_grad(loss_value, p.data, eps, index)
        err = relative_error(analytic, numeric, floor)
        if name.endswith("_embedding"):
            err[PAD] = 0
        results.append(GroupResult(name, float(err.max()), len(index)))
    return results
