"""CoNLL ingestion, BIO/BIOES conversion, vocabularies and padded batches."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
DOCSTART = "-DOCSTART-"
VOCAB_FORMAT_VERSION = 1


class ConllFormatError(ValueError):
    pass


class LabelError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class Sentence:
    tokens: list[str]
    labels: list[str]
    doc_start: bool = False
    columns: list[list[str]] | None = None  # raw rows, kept so taggers can echo input

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.labels)} labels")
        if not self.tokens:
            raise ValueError("empty sentence")

    def __len__(self) -> int:
        return len(self.tokens)


def parse_conll(text: str | Iterable[str], token_column: int = 0, label_column: int | None = -1) -> list[Sentence]:
    """Split CoNLL column text into sentences.

    Blocks are separated by blank lines.  A ``-DOCSTART-`` block is dropped and
    the next sentence gets ``doc_start=True``.  With ``label_column=None`` every
    label is ``"O"`` (raw token input for tagging).
    """
    lines = text.splitlines() if isinstance(text, str) else list(text)
    sentences: list[Sentence] = []
    block: list[tuple[int, list[str]]] = []
    pending_doc = False

    def flush():
        nonlocal pending_doc, block
        if not block:
            return
        rows = [cols for _, cols in block]
        width = len(rows[0])
        for lineno, cols in block:
            if len(cols) != width:
                raise ConllFormatError(f"line {lineno}: expected {width} columns, found {len(cols)}")
        if rows[0][0] == DOCSTART:
            pending_doc = True
        else:
            try:
                tokens = [r[token_column] for r in rows]
                labels = ["O"] * len(rows) if label_column is None else [r[label_column] for r in rows]
            except IndexError:
                raise ConllFormatError(f"line {block[0][0]}: column index out of range for {width} columns") from None
            sentences.append(Sentence(tokens, labels, doc_start=pending_doc, columns=rows))
            pending_doc = False
        block = []

    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            flush()
            continue
        block.append((lineno, line.split()))
    flush()
    return sentences


def read_conll(path: str | Path, token_column: int = 0, label_column: int | None = -1) -> list[Sentence]:
    with open(path, encoding="utf-8") as fh:
        return parse_conll(fh.read(), token_column, label_column)


def _split(label: str) -> tuple[str, str | None]:
    if label == "O":
        return "O", None
    prefix, sep, etype = label.partition("-")
    if not sep or prefix not in {"B", "I", "E", "S"} or not etype:
        raise LabelError(f"unknown label {label!r}")
    return prefix, etype


def repair_bio(labels: Sequence[str]) -> list[str]:
    """Turn an ``I-X`` that does not continue an ``X`` entity into ``B-X``."""
    out, prev = [], None
    for lab in labels:
        prefix, etype = _split(lab)
        if prefix in {"E", "S"}:
            raise LabelError(f"label {lab!r} is not BIO")
        if prefix == "I" and prev != etype:
            prefix = "B"
        out.append("O" if prefix == "O" else f"{prefix}-{etype}")
        prev = etype
    return out


def bio_to_bioes(labels: Sequence[str]) -> list[str]:
    bio = repair_bio(labels)
    out = []
    for i, lab in enumerate(bio):
        prefix, etype = _split(lab)
        if prefix == "O":
            out.append(lab)
            continue
        nxt = bio[i + 1] if i + 1 < len(bio) else "O"
        continues = nxt == f"I-{etype}"
        if prefix == "B":
            out.append(f"B-{etype}" if continues else f"S-{etype}")
        else:
            out.append(f"I-{etype}" if continues else f"E-{etype}")
    return out


def bioes_to_bio(labels: Sequence[str]) -> list[str]:
    """Map S->B and E->I, then repair. Also accepts ill-formed decoder output."""
    mapped = []
    for lab in labels:
        prefix, etype = _split(lab)
        if prefix == "O":
            mapped.append("O")
        else:
            mapped.append(f"{'B' if prefix in {'B', 'S'} else 'I'}-{etype}")
    return repair_bio(mapped)


def convert_scheme(labels: Sequence[str], source: str, target: str) -> list[str]:
    source, target = source.upper(), target.upper()
    for s in (source, target):
        if s not in {"BIO", "BIOES"}:
            raise ValueError(f"unknown scheme {s!r}")
    if source == "BIO":
        return bio_to_bioes(labels) if target == "BIOES" else repair_bio(labels)
    bio = bioes_to_bio(labels)
    return bio if target == "BIO" else bio_to_bioes(bio)


@dataclass
class Vocab:
    word_to_id: dict[str, int]
    char_to_id: dict[str, int]
    label_to_id: dict[str, int]
    word_sources: dict[str, str] = field(default_factory=dict)

    @property
    def id_to_label(self) -> list[str]:
        return sorted(self.label_to_id, key=self.label_to_id.__getitem__)

    def to_json(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "words": sorted(self.word_to_id, key=self.word_to_id.__getitem__),
            "chars": sorted(self.char_to_id, key=self.char_to_id.__getitem__),
            "labels": self.id_to_label,
            "word_sources": self.word_sources,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Vocab":
        if doc.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocab version {doc.get('version')!r}")
        return cls(
            {w: i for i, w in enumerate(doc["words"])},
            {c: i for i, c in enumerate(doc["chars"])},
            {lab: i for i, lab in enumerate(doc["labels"])},
            dict(doc.get("word_sources", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_json(), ensure_ascii=False, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def build_vocab(
    train: Sequence[Sentence],
    pretrained_words: Iterable[str] = (),
    min_freq: int = 3,
    scheme: str = "BIO",
) -> Vocab:
    """Ids follow first-seen order after the reserved PAD/UNK slots.

    Training words come first (in corpus order), then pretrained-only words in
    the order given.
    """
    pretrained = list(dict.fromkeys(pretrained_words))
    pretrained_set = set(pretrained)
    freq = Counter(tok for s in train for tok in s.tokens)

    words = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
    sources: dict[str, str] = {}
    for s in train:
        for tok in s.tokens:
            if tok in words:
                continue
            if freq[tok] >= min_freq:
                words[tok] = len(words)
                sources[tok] = "both" if tok in pretrained_set else "frequency"
    for w in pretrained:
        if w not in words:
            words[w] = len(words)
            sources[w] = "pretrained"

    chars = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
    for s in train:
        for tok in s.tokens:
            for ch in tok:
                chars.setdefault(ch, len(chars))

    labels: dict[str, int] = {}
    for s in train:
        for lab in convert_scheme(s.labels, scheme, "BIOES"):
            labels.setdefault(lab, len(labels))
    return Vocab(words, chars, labels, sources)


def lookup_word_id(vocab: Vocab, token: str) -> int:
    """Exact match, then lowercase match, then UNK."""
    wid = vocab.word_to_id.get(token)
    if wid is None:
        wid = vocab.word_to_id.get(token.lower(), UNK)
    return wid


@dataclass
class Batch:
    word_ids: np.ndarray   # [B, T]
    char_ids: np.ndarray   # [B, T, C]
    label_ids: np.ndarray  # [B, T]
    mask: np.ndarray       # [B, T] bool
    lengths: np.ndarray    # [B]

    @property
    def size(self) -> int:
        return len(self.lengths)

    def char_mask(self) -> np.ndarray:
        return self.char_ids != PAD


def encode_batch(
    sentences: Sequence[Sentence],
    vocab: Vocab,
    scheme: str = "BIO",
    pad_to: int | None = None,
    with_labels: bool = True,
) -> Batch:
    """Pad a list of sentences into id grids.

    ``pad_to`` forces a larger ``T_max`` (used to check padding invariance).
    Labels are converted to BIOES before lookup; with ``with_labels=False``
    they are ignored and label ids are 0.
    """
    if not sentences:
        raise ValueError("encode_batch: empty sentence list")
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    t_max = int(lengths.max()) if pad_to is None else max(int(lengths.max()), pad_to)
    c_max = max(len(tok) for s in sentences for tok in s.tokens)
    B = len(sentences)
    word_ids = np.full((B, t_max), PAD, dtype=np.int64)
    char_ids = np.full((B, t_max, max(c_max, 1)), PAD, dtype=np.int64)
    label_ids = np.zeros((B, t_max), dtype=np.int64)
    for b, s in enumerate(sentences):
        for t, tok in enumerate(s.tokens):
            word_ids[b, t] = lookup_word_id(vocab, tok)
            for c, ch in enumerate(tok):
                char_ids[b, t, c] = vocab.char_to_id.get(ch, UNK)
        if with_labels:
            for t, lab in enumerate(convert_scheme(s.labels, scheme, "BIOES")):
                if lab not in vocab.label_to_id:
                    raise LabelError(f"label {lab!r} not in the label vocabulary")
                label_ids[b, t] = vocab.label_to_id[lab]
    mask = np.arange(t_max)[None, :] < lengths[:, None]
    return Batch(word_ids, char_ids, label_ids, mask, lengths)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def read_embedding_words(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.split(" ", 1)[0] for line in fh if line.strip()]


def load_pretrained_embeddings(
    path: str | Path,
    vocab: Vocab,
    dim: int = 100,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Embedding matrix ``[|V|, dim]``: file rows where available, else Kaiming-uniform; PAD row is zero."""
    rng = rng if rng is not None else np.random.default_rng(0)
    table = kaiming_uniform(rng, (len(vocab.word_to_id), dim), fan_in=dim, dtype=dtype)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) <= 1 and not parts[0]:
                continue
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(f"line {lineno}: expected {dim} values, found {len(parts) - 1}")
            wid = vocab.word_to_id.get(parts[0])
            if wid is not None and wid not in (PAD, UNK):
                table[wid] = np.asarray(parts[1:], dtype=np.float64)
    table[PAD] = 0
    return table
