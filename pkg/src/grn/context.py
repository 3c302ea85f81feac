"""Multi-branch convolutional context layer.

Each branch is a same-length convolution over the token axis followed by tanh;
branches are fused with a channel-wise max.  ``mode="off"`` replaces the layer
with a linear projection to keep downstream shapes unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Graph, Node

CONTEXT_MODES = ("full", "branch3", "off")


@dataclass(frozen=True)
class ContextConfig:
    channels: int = 400
    kernels: tuple[int, ...] = (1, 3, 5)
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in CONTEXT_MODES:
            raise ValueError(f"context mode must be one of {CONTEXT_MODES}, got {self.mode!r}")
        if any(k % 2 != 1 for k in self.kernels):
            raise ValueError("context kernels must be odd")

    @property
    def active_kernels(self) -> tuple[int, ...]:
        if self.mode == "branch3":
            return (3,)
        if self.mode == "off":
            return ()
        return self.kernels


def branch(g: Graph, params: dict[str, Node], Z: Node, k: int) -> Node:
    conv = g.conv1d(Z, params[f"context.conv{k}.weight"], params[f"context.conv{k}.bias"], pad=k // 2)
    return g.tanh(conv)


def context_layer(g: Graph, params: dict[str, Node], Z: Node, mask: np.ndarray, kernels=(1, 3, 5)) -> Node:
    fused = g.max_across([branch(g, params, Z, k) for k in kernels])
    # re-zero after fusion: tanh(bias) leaks into padded slots
    return g.mul_const(fused, mask[..., None])


def context_branch_only(g: Graph, params: dict[str, Node], Z: Node, mask: np.ndarray, k: int = 3) -> Node:
    return g.mul_const(branch(g, params, Z, k), mask[..., None])


def project_only(g: Graph, params: dict[str, Node], Z: Node, mask: np.ndarray) -> Node:
    X = g.linear(Z, params["context.proj.weight"], params["context.proj.bias"])
    return g.mul_const(X, mask[..., None])


def apply(g: Graph, params: dict[str, Node], Z: Node, mask: np.ndarray, config: ContextConfig) -> Node:
    if config.mode == "off":
        return project_only(g, params, Z, mask)
    if config.mode == "branch3":
        return context_branch_only(g, params, Z, mask, 3)
    return context_layer(g, params, Z, mask, config.kernels)
