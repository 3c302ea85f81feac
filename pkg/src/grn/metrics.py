"""Exact-match span scoring with conlleval semantics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .corpus import LabelError, bioes_to_bio


class LabeledSpan(NamedTuple):
    entity_type: str
    start: int
    end: int  # inclusive


def extract_spans(labels: Sequence[str]) -> set[LabeledSpan]:
    """Maximal chunks of a BIO sequence.

    ``B-X`` always opens a chunk; an ``I-X`` that does not continue an open
    ``X`` chunk opens one too (conlleval behaviour).
    """
    spans = set()
    etype, start = None, 0
    for i, lab in enumerate(labels):
        if lab == "O":
            prefix, t = "O", None
        else:
            prefix, sep, t = lab.partition("-")
            if not sep or prefix not in ("B", "I") or not t:
                raise LabelError(f"unknown BIO label {lab!r}")
        continues = prefix == "I" and t == etype
        if etype is not None and not continues:
            spans.add(LabeledSpan(etype, start, i - 1))
            etype = None
        if prefix != "O" and not continues:
            etype, start = t, i
    if etype is not None:
        spans.add(LabeledSpan(etype, start, len(labels) - 1))
    return spans


def extract_spans_bioes(labels: Sequence[str]) -> set[LabeledSpan]:
    """Chunks read straight off a well-formed BIOES sequence."""
    spans = set()
    start = None
    for i, lab in enumerate(labels):
        prefix, _, t = lab.partition("-")
        if prefix == "S":
            spans.add(LabeledSpan(t, i, i))
        elif prefix == "B":
            start = i
        elif prefix == "E":
            spans.add(LabeledSpan(t, start, i))
            start = None
        elif prefix not in ("I", "O"):
            raise LabelError(f"unknown BIOES label {lab!r}")
    return spans


@dataclass
class SpanCounts:
    correct: int = 0
    found: int = 0   # predicted spans
    gold: int = 0

    def prf(self) -> tuple[float, float, float]:
        p = 100.0 * self.correct / self.found if self.found else 0.0
        r = 100.0 * self.correct / self.gold if self.gold else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return p, r, f


def count_spans(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]):
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences but {len(pred)} predicted")
    total = SpanCounts()
    per_type: dict[str, SpanCounts] = {}
    tokens = 0
    for n, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ValueError(f"sentence {n}: {len(g)} gold labels but {len(p)} predicted")
        tokens += len(g)
        gs, ps = extract_spans(g), extract_spans(p)
        hit = gs & ps
        total.correct += len(hit)
        total.found += len(ps)
        total.gold += len(gs)
        for key, spans in (("gold", gs), ("found", ps), ("correct", hit)):
            for etype, c in Counter(s.entity_type for s in spans).items():
                counts = per_type.setdefault(etype, SpanCounts())
                setattr(counts, key, getattr(counts, key) + c)
    return total, per_type, tokens


def span_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Micro-averaged precision, recall and F1 (percentages) over BIO sequences."""
    total, _, _ = count_spans(gold, pred)
    return total.prf()


def prf_bioes(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Convert BIOES to BIO first, as done before reporting."""
    return span_prf([bioes_to_bio(s) for s in gold], [bioes_to_bio(s) for s in pred])


def report(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> str:
    total, per_type, tokens = count_spans(gold, pred)
    p, r, f = total.prf()
    lines = [
        f"processed {tokens} tokens with {total.gold} phrases; found: {total.found} phrases; correct: {total.correct}.",
        f"precision: {p:6.2f}%; recall: {r:6.2f}%; FB1: {f:6.2f}",
    ]
    for etype in sorted(per_type):
        c = per_type[etype]
        tp, tr, tf = c.prf()
        lines.append(f"{etype:>17}: precision: {tp:6.2f}%; recall: {tr:6.2f}%; FB1: {tf:6.2f}  {c.found}")
    return "\n".join(lines) + "\n"
