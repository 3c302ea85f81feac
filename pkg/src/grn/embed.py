"""Word lookup plus character CNN, concatenated per token."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PAD, Batch
from .numcore import Graph, Node


@dataclass(frozen=True)
class ReprConfig:
    word_dim: int = 100
    char_dim: int = 30
    char_channels: int = 30
    char_kernel: int = 3

    def __post_init__(self):
        if self.char_kernel % 2 != 1:
            raise ValueError("char_kernel must be odd")

    @property
    def output_dim(self) -> int:
        return self.char_channels + self.word_dim


def word_feature(g: Graph, params: dict[str, Node], word_ids: np.ndarray) -> Node:
    return g.embedding(params["word_embedding"], word_ids, padding_idx=PAD)


def char_feature(g: Graph, params: dict[str, Node], char_ids: np.ndarray, token_mask: np.ndarray | None = None,
                 kernel: int = 3) -> Node:
    """Character embedding -> same-padded conv -> max over the word's real characters."""
    char_mask = char_ids != PAD
    if token_mask is not None:
        bad = token_mask & ~char_mask.any(axis=-1)
        if bad.any():
            raise ValueError(f"real token without characters at position {tuple(np.argwhere(bad)[0])}")
    chars = g.embedding(params["char_embedding"], char_ids, padding_idx=PAD)  # [B, T, C, char_dim]
    conv = g.conv1d(chars, params["char_conv.weight"], params["char_conv.bias"], pad=kernel // 2)
    return g.max_over_time(conv, mask=char_mask)


def represent(g: Graph, params: dict[str, Node], batch: Batch, config: ReprConfig, dropout: float,
              training: bool) -> Node:
    """``z = [c; w]`` per token, dropped out in training, zero at padded positions."""
    c = char_feature(g, params, batch.char_ids, batch.mask, config.char_kernel)
    w = word_feature(g, params, batch.word_ids)
    z = g.concat([c, w], axis=-1)
    z = g.dropout(z, dropout, training)
    return g.mul_const(z, batch.mask[..., None])
