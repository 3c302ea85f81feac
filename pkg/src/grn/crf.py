"""Linear-chain CRF over emission and transition scores.

Transitions are stored as one ``(L+1) x (L+1)`` matrix: rows ``0..L-1`` are
the previous label and row ``L`` is a virtual START; columns ``0..L-1`` are
the next label and column ``L`` is a virtual STOP.  The score of a path
``y_1..y_T`` is::

    trans[START, y_1] + sum_t emit[t, y_t] + sum_t trans[y_{t-1}, y_t] + trans[y_T, STOP]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numcore import Graph, Node

BRUTE_FORCE_LIMIT = 10 ** 6


class CrfInputError(ValueError):
    pass


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


@dataclass
class LatticeScores:
    emissions: Node        # [B, T, L]
    transitions: Node      # [L+1, L+1]
    mask: np.ndarray       # [B, T] bool, prefix-shaped

    @property
    def num_labels(self) -> int:
        return self.emissions.shape[-1]


def potentials(g: Graph, P: Node, emission_weight: Node, transitions: Node, mask: np.ndarray) -> LatticeScores:
    L = emission_weight.shape[0]
    if transitions.shape != (L + 1, L + 1):
        raise ValueError(f"transitions {transitions.shape} do not match {L} labels")
    return LatticeScores(g.linear(P, emission_weight), transitions, np.asarray(mask, dtype=bool))


def _split_transitions(trans: np.ndarray):
    L = trans.shape[0] - 1
    return trans[:L, :L], trans[L, :L], trans[:L, L]


def _check_mask(mask: np.ndarray) -> np.ndarray:
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise CrfInputError(f"sentence {int(np.argmin(lengths))} has no unmasked position")
    if not (mask == (np.arange(mask.shape[1])[None, :] < lengths[:, None])).all():
        raise CrfInputError("mask must be a contiguous prefix per sentence")
    return lengths


def forward_algorithm(emit: np.ndarray, trans: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-space forward pass; returns ``alpha [T, B, L]`` and ``logZ [B]``.

    ``alpha`` is carried unchanged through padded positions.
    """
    A, start, stop = _split_transitions(trans)
    B, T, L = emit.shape
    alpha = np.empty((T, B, L), dtype=emit.dtype)
    alpha[0] = start + emit[:, 0]
    for t in range(1, T):
        step = logsumexp(alpha[t - 1][:, :, None] + A[None], axis=1) + emit[:, t]
        alpha[t] = np.where(mask[:, t, None], step, alpha[t - 1])
    return alpha, logsumexp(alpha[T - 1] + stop, axis=1)


def backward_algorithm(emit: np.ndarray, trans: np.ndarray, mask: np.ndarray) -> np.ndarray:
    A, _, stop = _split_transitions(trans)
    B, T, L = emit.shape
    beta = np.empty((T, B, L), dtype=emit.dtype)
    beta[T - 1] = stop
    for t in range(T - 2, -1, -1):
        step = logsumexp(A[None] + (emit[:, t + 1] + beta[t + 1])[:, None, :], axis=2)
        beta[t] = np.where(mask[:, t + 1, None], step, stop)
    return beta


def path_scores(emit: np.ndarray, trans: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    A, start, stop = _split_transitions(trans)
    B, T, _ = emit.shape
    lengths = mask.sum(axis=1)
    rows = np.arange(B)
    labels = np.where(mask, labels, 0)
    score = start[labels[:, 0]] + emit[rows, 0, labels[:, 0]]
    for t in range(1, T):
        inc = A[labels[:, t - 1], labels[:, t]] + emit[rows, t, labels[:, t]]
        score = score + np.where(mask[:, t], inc, 0)
    return score + stop[labels[rows, lengths - 1]]


def nll_loss(g: Graph, scores: LatticeScores, gold: np.ndarray, reduce: str = "sum") -> Node:
    """Negative log-likelihood summed (or averaged) over sentences.

    The gradient w.r.t. emissions is marginals minus gold indicators; the
    transition gradient is expected minus observed transition counts.
    """
    mask = scores.mask
    lengths = _check_mask(mask)
    emit = scores.emissions.data
    trans = scores.transitions.data
    gold = np.where(mask, np.asarray(gold), 0)
    alpha, logZ = forward_algorithm(emit, trans, mask)
    gold_score = path_scores(emit, trans, gold, mask)
    per_sentence = logZ - gold_score
    scale = 1.0 if reduce == "sum" else 1.0 / len(lengths)
    loss = np.asarray(per_sentence.sum() * scale, dtype=emit.dtype)

    def backward(gout):
        B, T, L = emit.shape
        A, start, stop = _split_transitions(trans)
        beta = backward_algorithm(emit, trans, mask)
        m = mask.astype(emit.dtype)
        # unary marginals p(y_t = y)
        unary = np.exp(np.transpose(alpha, (1, 0, 2)) + np.transpose(beta, (1, 0, 2)) - logZ[:, None, None])
        unary *= m[..., None]
        rows = np.arange(B)
        gold_onehot = np.zeros_like(emit)
        gold_onehot[rows[:, None], np.arange(T)[None], np.where(mask, gold, 0)] = 1
        gold_onehot *= m[..., None]
        d_emit = unary - gold_onehot

        d_trans = np.zeros_like(trans)
        # pairwise marginals p(y_{t-1} = a, y_t = b)
        for t in range(1, T):
            mt = m[:, t][:, None, None]
            pair = np.exp(alpha[t - 1][:, :, None] + A[None] + (emit[:, t] + beta[t])[:, None, :]
                          - logZ[:, None, None]) * mt
            d_trans[:L, :L] += pair.sum(axis=0)
            gp = np.zeros((B, L, L), dtype=emit.dtype)
            gp[rows, gold[:, t - 1], gold[:, t]] = 1
            d_trans[:L, :L] -= (gp * mt).sum(axis=0)
        d_trans[L, :L] += unary[:, 0].sum(axis=0)
        np.add.at(d_trans[L], gold[:, 0], -1)
        last = lengths - 1
        d_trans[:L, L] += unary[rows, last].sum(axis=0)
        np.add.at(d_trans[:, L], gold[rows, last], -1)

        k = gout * scale
        scores.emissions.accumulate(d_emit * k)
        scores.transitions.accumulate(d_trans * k)

    return g.record(loss, (scores.emissions, scores.transitions), backward, "crf_nll")


def viterbi(emit: np.ndarray, trans: np.ndarray, mask: np.ndarray) -> tuple[list[list[int]], np.ndarray]:
    """Best path per sentence; ties resolve to the lowest label id.

    Returns the list of label-id paths (true lengths) and their scores.
    """
    emit = np.asarray(emit)
    mask = np.asarray(mask, dtype=bool)
    lengths = _check_mask(mask)
    A, start, stop = _split_transitions(np.asarray(trans))
    B, T, L = emit.shape
    delta = start + emit[:, 0]
    back = np.zeros((T, B, L), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, :, None] + A[None]  # [B, prev, next]
        best_prev = np.argmax(cand, axis=1)  # first max -> lowest id
        step = np.take_along_axis(cand, best_prev[:, None, :], axis=1)[:, 0] + emit[:, t]
        live = mask[:, t, None]
        delta = np.where(live, step, delta)
        back[t] = np.where(live, best_prev, np.arange(L)[None, :])
    final = delta + stop
    last = np.argmax(final, axis=1)
    best = final[np.arange(B), last]
    paths = []
    for b in range(B):
        y = [int(last[b])]
        for t in range(int(lengths[b]) - 1, 0, -1):
            y.append(int(back[t, b, y[-1]]))
        paths.append(y[::-1])
    return paths, best


def decode(scores: LatticeScores) -> tuple[list[list[int]], np.ndarray]:
    return viterbi(scores.emissions.data, scores.transitions.data, scores.mask)


def brute_force_check(emit: np.ndarray, trans: np.ndarray, length: int | None = None):
    """Enumerate every label sequence of one sentence.

    ``emit`` is ``[T, L]``.  Returns ``(logZ, best_path, best_score)``; ties in
    the best score resolve to the lexicographically smallest path.
    """
    emit = np.asarray(emit, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    T = emit.shape[0] if length is None else length
    L = emit.shape[1]
    if L ** T > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{L}^{T} label sequences exceed the enumeration limit")
    A = trans[:L, :L]
    start, stop = trans[L, :L], trans[:L, L]
    all_scores = []
    best_path, best_score = None, -np.inf
    for path in itertools.product(range(L), repeat=T):
        # left-to-right accumulation, the order a chain DP adds terms in
        s = start[path[0]] + emit[0, path[0]]
        for t in range(1, T):
            s = s + A[path[t - 1], path[t]]
            s = s + emit[t, path[t]]
        s = s + stop[path[-1]]
        all_scores.append(s)
        if s > best_score:
            best_path, best_score = list(path), s
    all_scores = np.array(all_scores)
    m = all_scores.max()
    logZ = m + np.log(np.exp(all_scores - m).sum())
    return float(logZ), best_path, float(best_score)


def transition_constraints(id_to_label: list[str]) -> np.ndarray:
    """Additive ``(L+1) x (L+1)`` mask forbidding ill-formed BIOES moves."""
    L = len(id_to_label)
    parts = [(lab.split("-", 1) + [None])[:2] if lab != "O" else ["O", None] for lab in id_to_label]
    penalty = np.zeros((L + 1, L + 1))
    forbid = -1e4

    def can_follow(prev, nxt) -> bool:
        pp, pt = prev
        np_, nt = nxt
        if pp in ("B", "I"):
            return np_ in ("I", "E") and nt == pt
        return np_ in ("O", "B", "S")

    for a in range(L):
        for b in range(L):
            if not can_follow(parts[a], parts[b]):
                penalty[a, b] = forbid
        if parts[a][0] not in ("O", "B", "S"):
            penalty[L, a] = forbid  # cannot start inside an entity
        if parts[a][0] in ("B", "I"):
            penalty[a, L] = forbid  # cannot stop inside an entity
    return penalty
