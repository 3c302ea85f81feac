"""Minimal reverse-mode differentiation engine over numpy arrays.

A :class:`Graph` is a tape: every operation appends its output node, so the
tape is always in a valid evaluation order and backpropagation simply walks it
in reverse.  Parameters are leaf nodes that live outside any graph and only
accumulate gradients.

Only the operations the tagger needs are provided.  Fused operations that are
cheaper to differentiate by hand (the CRF loss, the pairwise relation layer)
are added by other modules through :meth:`Graph.record`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class BackwardError(RuntimeError):
    """Invalid use of :meth:`Graph.backward`."""


class Node:
    """A value in a computation graph.

    ``grad`` stays ``None`` until something is accumulated into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Node, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match node shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None, dtype=None) -> Node:
    arr = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
    return Node(arr, requires_grad=True, name=name)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


sigmoid_array = _sigmoid


def _windows(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Zero-pad the time axis (-2) and return windows [..., T', k, D]."""
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x, widths)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-2)  # [..., T', D, k]
    return np.swapaxes(win, -1, -2)


class Graph:
    """Tape of nodes created during one forward pass.

    Args:
        seed: seeds the generator used for dropout masks.
        rng: an existing generator to use instead of ``seed``.
    """

    def __init__(self, seed: int | None = None, rng: np.random.Generator | None = None):
        self.nodes: list[Node] = []
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self._backward_done = False

    # -- tape plumbing -------------------------------------------------------

    def record(
        self,
        data: np.ndarray,
        parents: Sequence[Node],
        backward: Callable[[np.ndarray], None] | None,
        name: str | None = None,
    ) -> Node:
        """Append a new node computed from ``parents``.

        ``backward`` receives the upstream gradient and must call
        ``parent.accumulate`` for each parent that requires a gradient.
        """
        node = Node(data, requires_grad=any(p.requires_grad for p in parents), name=name)
        node.parents = tuple(parents)
        if node.requires_grad:
            node.backward_fn = backward
        self.nodes.append(node)
        return node

    def constant(self, data, dtype=None) -> Node:
        node = Node(np.asarray(data, dtype=dtype))
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise BackwardError(f"loss must be a scalar, got shape {loss.shape}")
        if self._backward_done:
            raise BackwardError("backward already ran on this graph; call zero_grad() first")
        self._backward_done = True
        if not loss.requires_grad:
            return
        loss.accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)

    def zero_grad(self) -> None:
        """Clear gradients of every node on the tape and of the leaves it reads."""
        seen = set()
        for node in self.nodes:
            node.zero_grad()
            for p in node.parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    p.zero_grad()
        self._backward_done = False

    # -- elementwise and structural ops -------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

        def backward(g):
            a.accumulate(g)
            b.accumulate(g)

        return self.record(a.data + b.data, (a, b), backward, "add")

    def add_const(self, x: Node, c: np.ndarray) -> Node:
        return self.record(x.data + c, (x,), x.accumulate, "add_const")

    def mul_const(self, x: Node, c) -> Node:
        """Multiply by a fixed array broadcastable to ``x`` (masks, scales)."""
        c = np.asarray(c, dtype=x.dtype)
        out = x.data * c

        def backward(g):
            x.accumulate(np.broadcast_to(g * c, x.shape).copy())

        return self.record(out, (x,), backward, "mul_const")

    def sum(self, x: Node) -> Node:
        def backward(g):
            x.accumulate(np.full(x.shape, g, dtype=x.dtype))

        return self.record(np.asarray(x.data.sum()), (x,), backward, "sum")

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        def backward(g):
            x.accumulate(g.reshape(x.shape))

        return self.record(x.data.reshape(shape), (x,), backward, "reshape")

    def concat(self, xs: Sequence[Node], axis: int = -1) -> Node:
        if not xs:
            raise ShapeError("concat: empty input list")
        sizes = [x.shape[axis] for x in xs]
        bounds = np.cumsum(sizes)[:-1]

        def backward(g):
            for x, part in zip(xs, np.split(g, bounds, axis=axis)):
                x.accumulate(part)

        return self.record(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward, "concat")

    def embedding(self, table: Node, ids: np.ndarray, padding_idx: int | None = None) -> Node:
        """Row lookup ``table[ids]``; the ``padding_idx`` row never receives gradient."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

        def backward(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            if padding_idx is not None:
                full[padding_idx] = 0
            table.accumulate(full)

        return self.record(table.data[ids], (table,), backward, "embedding")

    # -- layers -------------------------------------------------------------

    def linear(self, x: Node, W: Node, b: Node | None = None) -> Node:
        """``out[..., o] = sum_i W[o, i] x[..., i] + b[o]``."""
        if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or (b is not None and b.shape != (W.shape[0],)):
            bshape = None if b is None else b.shape
            raise ShapeError(f"linear: x{x.shape} incompatible with W{W.shape}, b{bshape}")
        out = x.data @ W.data.T
        if b is not None:
            out = out + b.data
        parents = (x, W) if b is None else (x, W, b)

        def backward(g):
            x.accumulate(g @ W.data)
            g2 = g.reshape(-1, g.shape[-1])
            W.accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
            if b is not None:
                b.accumulate(g2.sum(axis=0))

        return self.record(out, parents, backward, "linear")

    def conv1d(self, x: Node, kernel: Node, bias: Node | None = None, pad: int = 0) -> Node:
        """Convolve along the time axis of ``x [..., T, D_in]`` with ``kernel [D_out, k, D_in]``.

        Positions beyond the sequence are zeros; output length is ``T + 2*pad - k + 1``.
        """
        if kernel.data.ndim != 3 or kernel.shape[2] != x.shape[-1]:
            raise ShapeError(f"conv1d: x{x.shape} incompatible with kernel{kernel.shape}")
        d_out, k, d_in = kernel.shape
        T = x.shape[-2]
        t_out = T + 2 * pad - k + 1
        if t_out <= 0:
            raise ShapeError(f"conv1d: kernel width {k} exceeds padded length {T + 2 * pad}")
        win = _windows(x.data, k, pad)  # [..., T', k, D_in]
        flat_k = kernel.data.reshape(d_out, k * d_in)
        cols = win.reshape(win.shape[:-2] + (k * d_in,))
        out = cols @ flat_k.T
        if bias is not None:
            out = out + bias.data
        parents = (x, kernel) if bias is None else (x, kernel, bias)

        def backward(g):
            g2 = g.reshape(-1, d_out)
            kernel.accumulate((g2.T @ cols.reshape(-1, k * d_in)).reshape(kernel.shape))
            if bias is not None:
                bias.accumulate(g2.sum(axis=0))
            if x.requires_grad:
                dcols = (g @ flat_k).reshape(g.shape[:-1] + (k, d_in))
                lead = x.shape[:-2]
                dxp = np.zeros(lead + (T + 2 * pad, d_in), dtype=x.dtype)
                for j in range(k):
                    dxp[..., j:j + t_out, :] += dcols[..., j, :]
                x.accumulate(dxp[..., pad:pad + T, :])

        return self.record(out, parents, backward, "conv1d")

    def max_over_time(self, x: Node, mask: np.ndarray | None = None) -> Node:
        """Per-channel max over axis -2; ties go to the first index.

        ``mask [..., T]`` excludes positions; rows with no valid position yield 0.
        """
        if x.shape[-2] == 0:
            raise ShapeError("max_over_time: empty time axis")
        data = x.data
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            data = np.where(mask[..., None], data, -np.inf)
        idx = np.argmax(data, axis=-2)  # first max wins
        out = np.take_along_axis(data, idx[..., None, :], axis=-2)[..., 0, :]
        empty = None
        if mask is not None:
            empty = ~mask.any(axis=-1)
            out = np.where(empty[..., None], 0, out).astype(x.dtype)

        def backward(g):
            if empty is not None:
                g = np.where(empty[..., None], 0, g)
            full = np.zeros_like(x.data)
            np.put_along_axis(full, idx[..., None, :], g[..., None, :], axis=-2)
            x.accumulate(full)

        return self.record(out, (x,), backward, "max_over_time")

    def max_across(self, branches: Sequence[Node]) -> Node:
        """Elementwise max over a list of same-shaped nodes; ties go to the earliest branch."""
        if not branches:
            raise ShapeError("max_across: empty branch list")
        shape = branches[0].shape
        for br in branches:
            if br.shape != shape:
                raise ShapeError(f"max_across: shapes {shape} and {br.shape} differ")
        stack = np.stack([br.data for br in branches])
        idx = np.argmax(stack, axis=0)
        out = np.take_along_axis(stack, idx[None], axis=0)[0]

        def backward(g):
            for n, br in enumerate(branches):
                br.accumulate(np.where(idx == n, g, 0).astype(g.dtype))

        return self.record(out, tuple(branches), backward, "max_across")

    def activation(self, x: Node, kind: str) -> Node:
        if kind == "tanh":
            y = np.tanh(x.data)
            local = lambda: 1.0 - y * y  # noqa: E731
        elif kind == "sigmoid":
            y = _sigmoid(x.data)
            local = lambda: y * (1.0 - y)  # noqa: E731
        else:
            raise ValueError(f"unknown activation {kind!r}")

        def backward(g):
            x.accumulate(g * local())

        return self.record(y, (x,), backward, kind)

    def tanh(self, x: Node) -> Node:
        return self.activation(x, "tanh")

    def sigmoid(self, x: Node) -> Node:
        return self.activation(x, "sigmoid")

    def dropout(self, x: Node, rate: float, training: bool) -> Node:
        """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so eval mode is identity."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if not training or rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
        return self.mul_const(x, keep)


def unique_leaves(nodes: Iterable[Node]) -> list[Node]:
    out, seen = [], set()
    for n in nodes:
        if id(n) not in seen:
            seen.add(id(n))
            out.append(n)
    return out
