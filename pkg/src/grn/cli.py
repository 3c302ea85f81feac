"""``grn`` command line: train, eval, tag, export-relations, gradcheck, bench.

Exit codes: 0 success, 1 a check failed, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from .context import CONTEXT_MODES
from .corpus import (
    DOCSTART, ConllFormatError, EmbeddingFormatError, LabelError, Sentence, Vocab, build_vocab, encode_batch,
    load_pretrained_embeddings, parse_conll, read_conll, read_embedding_words,
)
from .crf import CrfInputError
from .metrics import report, span_prf
from .model import GRNTagger, ModelConfig, param_shapes, parameter_count
from .numcore import Graph
from .relation import FUSION_KINDS, export_heatmap, write_heatmap_tsv
from .trainer import (
    CheckpointError, TrainConfig, TrainingDiverged, init_params, load_checkpoint, load_config, predict,
    save_checkpoint, train_runs,
)

DATA_ERRORS = (OSError, ConllFormatError, LabelError, EmbeddingFormatError, CheckpointError, CrfInputError,
               ValueError, KeyError)


class UsageError(Exception):
    pass


def _require_files(*paths: str | None) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"file not found: {p}")


# --- train -----------------------------------------------------------------

def parameter_report(config: ModelConfig, n_words: int, n_chars: int, n_labels: int) -> str:
    shapes = param_shapes(config, n_words, n_chars, n_labels)
    lines = [f"fusion={config.fusion} context={config.context}"]
    total = 0
    for name, (shape, _) in shapes.items():
        size = int(np.prod(shape))
        total += size
        lines.append(f"{name:<24} {'x'.join(map(str, shape)):>12} {size:>10}")
    formula = parameter_count(config, n_words, n_chars, n_labels)
    lines.append(f"{'total':<24} {'':>12} {total:>10}")
    lines.append(f"{'formula':<24} {'':>12} {formula:>10}")
    return "\n".join(lines) + "\n"


def _train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("runs", args.runs), ("fusion", args.fusion),
                                   ("context", args.context), ("precision", args.precision),
                                   ("epochs", args.epochs), ("batch_size", args.batch_size),
                                   ("min_freq", args.min_freq)) if v is not None}
    return config.replace(**overrides) if overrides else config


def cmd_train(args) -> int:
    _require_files(args.train, args.dev, args.test, args.embeddings, args.config)
    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_set = read_conll(args.train)
    dev_set = read_conll(args.dev) if args.dev else None
    test_set = read_conll(args.test) if args.test else None
    pretrained = read_embedding_words(args.embeddings) if args.embeddings else []
    vocab = build_vocab(train_set, pretrained, config.min_freq, config.scheme)
    vocab.save(out / "vocab.json")
    embeddings = None
    if args.embeddings:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
        embeddings = load_pretrained_embeddings(args.embeddings, vocab, config.model.word_dim, rng, config.dtype)

    counts = (len(vocab.word_to_id), len(vocab.char_to_id), len(vocab.label_to_id))
    params_text = parameter_report(config.model, *counts)
    (out / "parameters.txt").write_text(params_text)
    sys.stdout.write(params_text)

    results, summary = train_runs(config, train_set, vocab, dev_set, test_set, embeddings, log_dir=out)
    for k, res in enumerate(results):
        save_checkpoint(res.checkpoint, out / f"model_run{k}.ckpt")
    # the run with the best dev score (first run when there is no dev set) becomes model.ckpt
    best = max(range(len(results)), key=lambda k: (results[k].checkpoint.dev_f1 or 0.0, -k))
    save_checkpoint(results[best].checkpoint, out / "model.ckpt")

    train_prf = span_prf([s.labels for s in train_set], predict(results[best].checkpoint.model(), train_set, vocab))
    summary.update({
        "parameters": parameter_count(config.model, *counts),
        "fusion": config.model.fusion,
        "context": config.model.context,
        "best_run": best,
        "train_f1_best_run": train_prf[2],
        "config": config.to_dict(),
    })
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lines = [f"runs: {len(results)}  best run: {best}  train F1 (best run): {train_prf[2]:.2f}"]
    for key in ("dev_f1", "test_p", "test_r", "test_f1"):
        if key in summary:
            lines.append(f"{key}: mean {summary[key]['mean']:.2f} std {summary[key]['std']:.2f}")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# --- eval ------------------------------------------------------------------

def cmd_eval(args) -> int:
    _require_files(args.gold, args.pred)
    if args.pred is None:
        # conlleval layout: gold in the second-to-last column, prediction in the last
        gold_s = read_conll(args.gold, label_column=-2)
        pred_s = read_conll(args.gold, label_column=-1)
    else:
        gold_s, pred_s = read_conll(args.gold), read_conll(args.pred)
    if len(gold_s) != len(pred_s):
        raise UsageError(f"{args.gold} has {len(gold_s)} sentences but {args.pred} has {len(pred_s)}")
    for n, (g, p) in enumerate(zip(gold_s, pred_s)):
        if g.tokens != p.tokens:
            raise UsageError(f"sentence {n + 1}: tokens differ between gold and prediction")
    sys.stdout.write(report([s.labels for s in gold_s], [s.labels for s in pred_s]))
    return 0


# --- tag / export-relations ---------------------------------------------------

def _load_model(args) -> tuple[GRNTagger, Vocab]:
    _require_files(args.model)
    vocab_path = Path(args.vocab) if args.vocab else Path(args.model).with_name("vocab.json")
    _require_files(str(vocab_path))
    vocab = Vocab.load(vocab_path)
    return load_checkpoint(args.model, vocab).model(), vocab


def format_tagged(sentences: Sequence[Sentence], labels: Sequence[Sequence[str]]) -> str:
    out = []
    for s, pred in zip(sentences, labels):
        if s.doc_start:
            out.append(f"{DOCSTART} O\n\n")
        rows = s.columns or [[t] for t in s.tokens]
        out.append("".join(" ".join(cols + [lab]) + "\n" for cols, lab in zip(rows, pred)) + "\n")
    return "".join(out)


def cmd_tag(args) -> int:
    _require_files(args.input)
    model, vocab = _load_model(args)
    sentences = parse_conll(Path(args.input).read_text(encoding="utf-8"), label_column=None)
    text = format_tagged(sentences, predict(model, sentences, vocab)) if sentences else ""
    _write(args.output, text)
    return 0


def cmd_export_relations(args) -> int:
    if (args.sentence is None) == (args.input is None):
        raise UsageError("give exactly one of --sentence or --input")
    _require_files(args.input)
    model, vocab = _load_model(args)
    if model.config.fusion == "none":
        raise UsageError("model was trained without a relation layer (fusion=none)")
    if args.sentence is not None:
        sentences = [Sentence(args.sentence.split(), ["O"] * len(args.sentence.split()))]
    else:
        sentences = parse_conll(Path(args.input).read_text(encoding="utf-8"), label_column=None)
    parts = []
    for s in sentences:
        batch = encode_batch([s], vocab, with_labels=False)
        h, tokens = export_heatmap(model.relation_map(batch), batch.mask, s.tokens)
        buf = io.StringIO()
        write_heatmap_tsv(h, tokens, buf)
        parts.append(buf.getvalue())
    _write(args.output, "\n".join(parts))
    return 0


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# --- gradcheck / bench ---------------------------------------------------------

def cmd_gradcheck(args) -> int:
    base = gradcheck.TOY_CONFIG.to_dict()
    base.update({k: v for k, v in (("word_dim", args.word_dim), ("char_dim", args.char_dim),
                                   ("char_channels", args.char_dim), ("context_channels", args.context_channels),
                                   ("fusion", args.fusion), ("context", args.context)) if v is not None})
    model, batch = gradcheck.toy_model(ModelConfig.from_dict(base), seed=args.seed)

    if args.corrupt_grad and args.corrupt_grad not in model.params:
        raise UsageError(f"unknown parameter group {args.corrupt_grad!r}")
    corrupt = _corrupter(args.corrupt_grad) if args.corrupt_grad else None
    results = gradcheck.check_model(model, batch, corrupt=corrupt)
    for r in results:
        print(f"{r.name:<24} worst_rel_err={r.worst:.3e} entries={r.size} {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} parameter groups below 1e-4")
    return 0


def _corrupter(name: str):
    """Negative control for tests: bump one analytic gradient entry."""
    def corrupt(params):
        params[name].grad.flat[-1] += 1.0
    return corrupt


BENCH_COLUMNS = ["batch", "length", "rep", "forward_s", "forward_backward_s"]


def _parse_sizes(spec: str) -> list[tuple[int, int]]:
    sizes = []
    for item in spec.split(","):
        try:
            b, t = (int(v) for v in item.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad size {item!r}; expected BxT, e.g. 10x30") from None
        if b < 1 or t < 1:
            raise UsageError(f"bad size {item!r}; both dimensions must be positive")
        sizes.append((b, t))
    return sizes


def cmd_bench(args) -> int:
    sizes = _parse_sizes(args.sizes)
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    config = ModelConfig(fusion=args.fusion or "grn", context=args.context or "full")
    dtype = np.float64 if args.precision == "f64" else np.float32
    rng = np.random.default_rng(args.seed)
    words = [f"w{i}" for i in range(50)]
    vocab = build_vocab([Sentence(words, ["B-PER"] + ["O"] * 49)], min_freq=1)
    params = init_params(config, len(vocab.word_to_id), len(vocab.char_to_id), len(vocab.label_to_id), rng, dtype)
    model = GRNTagger(config, params, vocab.id_to_label)

    writer = csv.writer(sys.stdout if args.output in (None, "-") else open(args.output, "w", newline=""))
    writer.writerow(BENCH_COLUMNS)
    for b, t in sizes:
        sents = [Sentence(list(rng.choice(words, t)), ["O"] * t) for _ in range(b)]
        batch = encode_batch(sents, vocab)
        for rep in range(args.reps):
            t0 = time.perf_counter()
            model.loss(Graph(rng=rng), batch, training=True)
            fwd = time.perf_counter() - t0
            t0 = time.perf_counter()
            g = Graph(rng=rng)
            g.backward(model.loss(g, batch, training=True))
            both = time.perf_counter() - t0
            for p in params.values():
                p.zero_grad()
            writer.writerow([b, t, rep, f"{fwd:.6f}", f"{both:.6f}"])
    return 0


# --- wiring -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grn", description="Gated relation network NER tagger")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def variant_flags(p):
        p.add_argument("--fusion", choices=FUSION_KINDS)
        p.add_argument("--context", choices=CONTEXT_MODES)

    p = sub.add_parser("train", help="train one or more seeded runs")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--embeddings", help="GloVe-style text file: word v1 ... vD")
    p.add_argument("--config", help="flat YAML/JSON file with TrainConfig keys")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--min-freq", type=int)
    p.add_argument("--precision", choices=["f32", "f64"])
    variant_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against gold labels")
    p.add_argument("gold", help="gold CoNLL file (or a combined 'token ... gold pred' file)")
    p.add_argument("pred", nargs="?", help="predicted CoNLL file, labels in the last column")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("tag", cmd_tag, "append predicted labels to a CoNLL or token file"),
                                 ("export-relations", cmd_export_relations, "write relation heat maps as TSV")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True, help="checkpoint file")
        p.add_argument("--vocab", help="vocab.json (default: next to the checkpoint)")
        p.add_argument("--output", "-o", help="output path (default: stdout)")
        if name == "tag":
            p.add_argument("--input", required=True)
        else:
            p.add_argument("--input")
            p.add_argument("--sentence", help="whitespace-tokenised sentence")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group (64-bit)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--word-dim", type=int)
    p.add_argument("--char-dim", type=int)
    p.add_argument("--context-channels", type=int)
    p.add_argument("--corrupt-grad", metavar="PARAM", help=argparse.SUPPRESS)
    variant_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time forward and forward+backward on synthetic batches")
    p.add_argument("--sizes", default="10x20,10x40", help="comma-separated BxT grid")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")
    p.add_argument("--output", "-o")
    variant_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"grn {args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"grn {args.command}: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"grn {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
