"""The full tagger: representation -> context -> relation -> CRF."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import context as ctx
from . import crf
from .corpus import Batch, bioes_to_bio
from .embed import ReprConfig, represent
from .numcore import Graph, Node
from .relation import DEFAULT_PAIR_BUDGET, FUSION_KINDS, fuse_gattn, gated_relation, predict_features, relation_scores


@dataclass(frozen=True)
class ModelConfig:
    word_dim: int = 100
    char_dim: int = 30
    char_channels: int = 30
    char_kernel: int = 3
    context_channels: int = 400
    context_kernels: tuple[int, ...] = (1, 3, 5)
    context: str = "full"
    fusion: str = "grn"
    dropout: float = 0.5
    constrain_transitions: bool = False
    pair_budget: int = DEFAULT_PAIR_BUDGET

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        object.__setattr__(self, "context_kernels", tuple(self.context_kernels))
        self.repr_config, self.context_config  # validate eagerly

    @property
    def repr_config(self) -> ReprConfig:
        return ReprConfig(self.word_dim, self.char_dim, self.char_channels, self.char_kernel)

    @property
    def context_config(self) -> ctx.ContextConfig:
        return ctx.ContextConfig(self.context_channels, self.context_kernels, self.context)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_kernels"] = list(self.context_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(config: ModelConfig, n_words: int, n_chars: int, n_labels: int) -> dict[str, tuple[tuple[int, ...], int | None]]:
    """Canonical parameter names -> (shape, fan_in); ``fan_in=None`` marks zero-initialised arrays."""
    rc = config.repr_config
    H = config.context_channels
    d_in = rc.output_dim
    shapes: dict[str, tuple[tuple[int, ...], int | None]] = {
        "word_embedding": ((n_words, rc.word_dim), rc.word_dim),
        "char_embedding": ((n_chars, rc.char_dim), rc.char_dim),
        "char_conv.weight": ((rc.char_channels, rc.char_kernel, rc.char_dim), rc.char_kernel * rc.char_dim),
        "char_conv.bias": ((rc.char_channels,), None),
    }
    if config.context == "off":
        shapes["context.proj.weight"] = ((H, d_in), d_in)
        shapes["context.proj.bias"] = ((H,), None)
    else:
        for k in config.context_config.active_kernels:
            shapes[f"context.conv{k}.weight"] = ((H, k, d_in), k * d_in)
            shapes[f"context.conv{k}.bias"] = ((H,), None)
    if config.fusion in ("grn", "dfn"):
        shapes["relation.weight"] = ((H, 2 * H), 2 * H)
        shapes["relation.bias"] = ((H,), None)
    elif config.fusion == "gattn":
        shapes["relation.weight"] = ((1, 2 * H), 2 * H)
        shapes["relation.bias"] = ((1,), None)
    shapes["crf.emission.weight"] = ((n_labels, H), H)
    shapes["crf.transitions"] = ((n_labels + 1, n_labels + 1), None)
    return shapes


def parameter_count(config: ModelConfig, n_words: int, n_chars: int, n_labels: int) -> int:
    """Closed-form parameter count (documented in the README)."""
    V, C, L = n_words, n_chars, n_labels
    wd, cd, cc, kc = config.word_dim, config.char_dim, config.char_channels, config.char_kernel
    H, D = config.context_channels, config.char_channels + config.word_dim
    total = V * wd + C * cd + cc * kc * cd + cc
    if config.context == "full":
        total += sum(H * k * D + H for k in config.context_kernels)
    elif config.context == "branch3":
        total += H * 3 * D + H
    else:
        total += H * D + H
    total += {"grn": 2 * H * H + H, "dfn": 2 * H * H + H, "gattn": 2 * H + 1, "none": 0}[config.fusion]
    return total + L * H + (L + 1) ** 2


class GRNTagger:
    """Holds parameters and runs the forward pass.

    ``params`` maps canonical names to leaf nodes; optimizers update
    ``node.data`` in place.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Node], id_to_label: list[str]):
        self.config = config
        self.params = params
        self.id_to_label = list(id_to_label)
        self._constraints = (crf.transition_constraints(self.id_to_label) if config.constrain_transitions
                             else None)

    @property
    def dtype(self):
        return self.params["crf.transitions"].dtype

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def context_features(self, g: Graph, batch: Batch, training: bool) -> Node:
        Z = represent(g, self.params, batch, self.config.repr_config, self.config.dropout, training)
        return ctx.apply(g, self.params, Z, batch.mask, self.config.context_config)

    def features(self, g: Graph, batch: Batch, training: bool) -> Node:
        X = self.context_features(g, batch, training)
        kind = self.config.fusion
        if kind == "none":
            P = g.dropout(X, self.config.dropout, training)
        else:
            W, b = self.params["relation.weight"], self.params["relation.bias"]
            if kind == "gattn":
                r = fuse_gattn(g, X, batch.mask, W, b)
            else:
                r = gated_relation(g, X, batch.mask, W, b, kind, self.config.pair_budget)
            P = predict_features(g, r, self.config.dropout, training)
        return g.mul_const(P, batch.mask[..., None])

    def lattice(self, g: Graph, batch: Batch, training: bool) -> crf.LatticeScores:
        P = self.features(g, batch, training)
        trans = self.params["crf.transitions"]
        if self._constraints is not None:
            trans = g.add_const(trans, self._constraints.astype(trans.dtype))
        return crf.potentials(g, P, self.params["crf.emission.weight"], trans, batch.mask)

    def loss(self, g: Graph, batch: Batch, training: bool = True, reduce: str = "sum") -> Node:
        return crf.nll_loss(g, self.lattice(g, batch, training), batch.label_ids, reduce)

    def predict_ids(self, batch: Batch) -> list[list[int]]:
        paths, _ = crf.decode(self.lattice(Graph(), batch, training=False))
        return paths

    def predict(self, batch: Batch) -> list[list[str]]:
        """Decoded labels converted back to BIO."""
        return [bioes_to_bio([self.id_to_label[i] for i in path]) for path in self.predict_ids(batch)]

    def relation_map(self, batch: Batch) -> np.ndarray:
        """Pre-gate relation scores ``[B, T, T, D]`` (``[B, T, T, 1]`` for gattn) in eval mode."""
        if self.config.fusion == "none":
            raise ValueError("model has no relation layer (fusion='none')")
        g = Graph()
        X = self.context_features(g, batch, training=False)
        return relation_scores(g, X, batch.mask, self.params["relation.weight"], self.params["relation.bias"]).data
