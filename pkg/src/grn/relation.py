"""Gated relation layer.

For context features ``x_1..x_T`` of one sentence the layer builds a score
vector ``r_ij = W [x_i; x_j] + b`` for every ordered pair (``i == j``
included) and fuses the features into one global vector per token:

* ``grn``   -- mean over j of ``sigmoid(r_ij) * x_j`` (channel-wise gates)
* ``dfn``   -- mean over j of ``r_ij``
* ``gattn`` -- mean over j of ``alpha_ij * x_j`` with a scalar gate per pair
* ``none``  -- layer bypassed

Means run over the real tokens only and divide by the true sentence length.
Splitting ``W = [W_a | W_b]`` lets the pairwise tensor be formed as
``A_i + C_j + b`` without materialising the concatenated inputs.
"""

from __future__ import annotations

from typing import Sequence, TextIO

import numpy as np

from .numcore import Graph, Node, sigmoid_array

FUSION_KINDS = ("grn", "dfn", "gattn", "none")
DEFAULT_PAIR_BUDGET = 1 << 24  # elements of the [B, T, T, D] tensor held at once


def pair_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask[:, :, None] & mask[:, None, :]


def _lengths(mask: np.ndarray, dtype) -> np.ndarray:
    # clamp so all-padding rows divide by 1 instead of 0
    return np.maximum(np.asarray(mask).sum(axis=1), 1).astype(dtype)[:, None, None]


def _split_weight(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = W.shape[1] // 2
    return W[:, :half], W[:, half:]


def _scores(X, W, b):
    Wa, Wb = _split_weight(W)
    if W.shape[0] == 1:
        # row-wise reduction: a single-column matmul can switch BLAS kernels with the batch shape
        A = (X * Wa[0]).sum(axis=-1, keepdims=True)
        C = (X * Wb[0]).sum(axis=-1, keepdims=True)
    else:
        A = X @ Wa.T
        C = X @ Wb.T
    return A[:, :, None, :] + C[:, None, :, :] + b


def _scores_backward(dR, X, W):
    Wa, Wb = _split_weight(W)
    dA = dR.sum(axis=2)
    dC = dR.sum(axis=1)
    D = X.shape[-1]
    dW = np.concatenate([dA.reshape(-1, dA.shape[-1]).T @ X.reshape(-1, D),
                         dC.reshape(-1, dC.shape[-1]).T @ X.reshape(-1, D)], axis=1)
    db = dR.sum(axis=(0, 1, 2))
    dX = dA @ Wa + dC @ Wb
    return dX, dW, db


def _grn_forward(R, X, pm, T):
    S = sigmoid_array(R)
    terms = S * X[:, None, :, :] * pm[..., None]
    return terms.sum(axis=2) / T, S


def _grn_backward(dout, S, X, pm, T):
    G = (dout / T)[:, :, None, :] * pm[..., None]
    dX = (G * S).sum(axis=1)
    dR = G * X[:, None, :, :] * S * (1 - S)
    return dR, dX


def _dfn_forward(R, pm, T):
    return (R * pm[..., None]).sum(axis=2) / T


def _dfn_backward(dout, pm, T):
    return (dout / T)[:, :, None, :] * pm[..., None]


def relation_scores(g: Graph, X: Node, mask: np.ndarray, weight: Node, bias: Node) -> Node:
    """``R[b, i, j] = W [x_i; x_j] + b`` for all ordered pairs.

    Entries whose ``i`` or ``j`` is padding are still filled in but are
    never read by the fusion ops; use :func:`pair_mask` to tell them apart.
    """
    D = X.shape[-1]
    if weight.shape[1] != 2 * D or bias.shape != (weight.shape[0],):
        raise ValueError(f"relation weight {weight.shape} / bias {bias.shape} do not fit features of width {D}")
    R = _scores(X.data, weight.data, bias.data)

    def backward(dR):
        dX, dW, db = _scores_backward(dR, X.data, weight.data)
        X.accumulate(dX)
        weight.accumulate(dW)
        bias.accumulate(db)

    return g.record(R, (X, weight, bias), backward, "relation_scores")


def fuse_grn(g: Graph, R: Node, X: Node, mask: np.ndarray) -> Node:
    pm = pair_mask(mask).astype(X.dtype)
    T = _lengths(mask, X.dtype)
    out, S = _grn_forward(R.data, X.data, pm, T)

    def backward(dout):
        dR, dX = _grn_backward(dout, S, X.data, pm, T)
        R.accumulate(dR)
        X.accumulate(dX)

    return g.record(out, (R, X), backward, "fuse_grn")


def fuse_dfn(g: Graph, R: Node, mask: np.ndarray) -> Node:
    pm = pair_mask(mask).astype(R.dtype)
    T = _lengths(mask, R.dtype)

    def backward(dout):
        R.accumulate(_dfn_backward(dout, pm, T))

    return g.record(_dfn_forward(R.data, pm, T), (R,), backward, "fuse_dfn")


def fuse_gattn(g: Graph, X: Node, mask: np.ndarray, weight: Node, bias: Node) -> Node:
    """Scalar gate ``alpha_ij = sigmoid(w [x_i; x_j] + b)`` weighting ``x_j``."""
    if weight.shape != (1, 2 * X.shape[-1]) or bias.shape != (1,):
        raise ValueError(f"gattn weight must be (1, {2 * X.shape[-1]}) with bias (1,)")
    pm = pair_mask(mask).astype(X.dtype)
    T = _lengths(mask, X.dtype)
    logits = _scores(X.data, weight.data, bias.data)[..., 0]  # [B, T, T]
    alpha = sigmoid_array(logits)
    out = (alpha[..., None] * X.data[:, None, :, :] * pm[..., None]).sum(axis=2) / T

    def backward(dout):
        G = dout / T  # [B, T, D]
        # d alpha_ij = <G_i, x_j> on real pairs
        dalpha = (G[:, :, None, :] * X.data[:, None, :, :]).sum(axis=-1) * pm
        dz = dalpha * alpha * (1 - alpha)
        dX_direct = ((alpha * pm)[..., None] * G[:, :, None, :]).sum(axis=1)
        dX, dW, db = _scores_backward(dz[..., None], X.data, weight.data)
        X.accumulate(dX + dX_direct)
        weight.accumulate(dW)
        bias.accumulate(db)

    return g.record(out, (X, weight, bias), backward, "fuse_gattn")


def gated_relation(g: Graph, X: Node, mask: np.ndarray, weight: Node, bias: Node, kind: str = "grn",
                   budget: int = DEFAULT_PAIR_BUDGET) -> Node:
    """``relation_scores`` followed by GRN or DFN fusion, in sentence chunks.

    The pairwise tensor for at most ``budget`` elements lives at a time; it is
    recomputed chunk by chunk in backward instead of being kept on the tape.
    """
    if kind not in ("grn", "dfn"):
        raise ValueError(f"gated_relation handles 'grn' and 'dfn', got {kind!r}")
    B, T_max, D = X.shape
    step = max(1, budget // max(1, T_max * T_max * weight.shape[0]))
    chunks = [slice(s, min(B, s + step)) for s in range(0, B, step)]
    pm_all = pair_mask(mask).astype(X.dtype)
    T_all = _lengths(mask, X.dtype)
    W, b = weight.data, bias.data

    out = np.empty(X.shape[:2] + (W.shape[0],), dtype=X.dtype)
    for sl in chunks:
        R = _scores(X.data[sl], W, b)
        if kind == "grn":
            out[sl] = _grn_forward(R, X.data[sl], pm_all[sl], T_all[sl])[0]
        else:
            out[sl] = _dfn_forward(R, pm_all[sl], T_all[sl])

    def backward(dout):
        dX = np.zeros_like(X.data)
        dW = np.zeros_like(W)
        db = np.zeros_like(b)
        for sl in chunks:
            Xc, pm, T = X.data[sl], pm_all[sl], T_all[sl]
            if kind == "grn":
                S = sigmoid_array(_scores(Xc, W, b))
                dR, dXd = _grn_backward(dout[sl], S, Xc, pm, T)
                dX[sl] += dXd
            else:
                dR = _dfn_backward(dout[sl], pm, T)
            dXs, dWc, dbc = _scores_backward(dR, Xc, W)
            dX[sl] += dXs
            dW += dWc
            db += dbc
        X.accumulate(dX)
        weight.accumulate(dW)
        bias.accumulate(db)

    return g.record(out, (X, weight, bias), backward, f"gated_relation[{kind}]")


def predict_features(g: Graph, r: Node, rate: float, training: bool) -> Node:
    return g.dropout(g.tanh(r), rate, training)


def heatmap(R: np.ndarray, length: int | None = None) -> np.ndarray:
    """L2 norm of each ``r_ij`` min-max scaled to [0, 1] over the whole matrix.

    ``R`` is ``[T, T, D]`` (or ``[T, T]`` for scalar scores).  A constant
    matrix maps to all zeros.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 2:
        R = R[..., None]
    if length is not None:
        R = R[:length, :length]
    h = np.sqrt((R * R).sum(axis=-1))
    lo, hi = h.min(), h.max()
    if hi - lo <= 0:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def export_heatmap(R: Node | np.ndarray, mask: np.ndarray, tokens: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    data = R.data if isinstance(R, Node) else np.asarray(R)
    mask = np.asarray(mask, dtype=bool)
    if data.shape[0] != 1 or mask.shape[0] != 1:
        raise ValueError("export_heatmap expects a single sentence (batch of 1)")
    T = int(mask[0].sum())
    if T != len(tokens):
        raise ValueError(f"{len(tokens)} tokens but mask covers {T}")
    return heatmap(data[0], T), list(tokens)


def write_heatmap_tsv(h: np.ndarray, tokens: Sequence[str], fh: TextIO) -> None:
    fh.write("\t".join(tokens) + "\n")
    for tok, row in zip(tokens, h):
        fh.write(tok + "\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")


def read_heatmap_tsv(text: str) -> tuple[np.ndarray, list[str]]:
    lines = [ln for ln in text.splitlines() if ln]
    tokens = lines[0].split("\t")
    rows = [ln.split("\t") for ln in lines[1:]]
    return np.array([[float(v) for v in r[1:]] for r in rows]), tokens
