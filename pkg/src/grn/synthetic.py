"""Small template-generated NER corpora for smoke tests, demos and benchmarks."""

from __future__ import annotations

import numpy as np

from .corpus import Sentence

PERSONS = [["John", "Smith"], ["Mary"], ["Peter", "Blair"], ["Anna", "Lee"], ["Tom"]]
PLACES = [["Paris"], ["New", "York"], ["Berlin"], ["Hong", "Kong"], ["Rome"]]
TEMPLATES = [
    "{PER} went to {LOC} yesterday .",
    "{PER} lives in {LOC} .",
    "the talks in {LOC} were led by {PER} .",
    "{PER} met {PER} in {LOC} .",
    "officials in {LOC} said on Monday that {PER} will visit {LOC} next week .",
    "{PER} said the weather was fine .",
]


def make_corpus(n: int = 20, seed: int = 0) -> list[Sentence]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        template = TEMPLATES[k % len(TEMPLATES)] if k < len(TEMPLATES) else TEMPLATES[rng.integers(len(TEMPLATES))]
        tokens, labels = [], []
        for word in template.split():
            if word in ("{PER}", "{LOC}"):
                etype = word[1:4]
                pool = PERSONS if etype == "PER" else PLACES
                name = pool[rng.integers(len(pool))]
                tokens.extend(name)
                labels.extend([f"B-{etype}"] + [f"I-{etype}"] * (len(name) - 1))
            else:
                tokens.append(word)
                labels.append("O")
        out.append(Sentence(tokens, labels))
    return out


def to_conll(sentences: list[Sentence]) -> str:
    return "".join("".join(f"{t} {lab}\n" for t, lab in zip(s.tokens, s.labels)) + "\n" for s in sentences)
