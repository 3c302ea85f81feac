"""Training recipe, evaluation and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from .corpus import PAD, Sentence, Vocab, convert_scheme, encode_batch, kaiming_uniform
from .metrics import span_prf
from .model import GRNTagger, ModelConfig, param_shapes
from .numcore import DTYPES, Graph, Node

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GRNCKPT\n"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch,lr,train_loss,dev_p,dev_r,dev_f1,seconds"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class VocabMismatchError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 10
    momentum: float = 0.9
    lr0: float = 0.02
    rho: float = 0.02
    epochs: int = 200
    seed: int = 0
    runs: int = 5
    grad_clip: float | None = 5.0
    precision: str = "f32"
    min_freq: int = 3
    scheme: str = "BIO"
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d.update(self.model.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        own = {f.name for f in fields(cls)} - {"model"}
        model_keys = {f.name for f in fields(ModelConfig)}
        unknown = set(d) - own - model_keys
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(model=ModelConfig.from_dict({k: v for k, v in d.items() if k in model_keys}),
                   **{k: v for k, v in d.items() if k in own})

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def load_config(path: str | Path) -> TrainConfig:
    """Flat key/value file (YAML or JSON) whose keys mirror :class:`TrainConfig`."""
    import yaml

    doc = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a flat key/value mapping")
    return TrainConfig.from_dict(doc)


def lr_schedule(t: int, lr0: float = 0.02, rho: float = 0.02) -> float:
    if t < 0:
        raise ValueError("epoch index must be non-negative")
    return lr0 / (1.0 + rho * t)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float, momentum: float = 0.9,
                      clip: float | None = None) -> None:
    """Classical momentum, in place: ``v = mu*v + g; theta -= lr*v``."""
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    if clip is not None:
        grads = {k: v.copy() for k, v in grads.items()}
        clip_global_norm(grads, clip)
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v.astype(params[name].dtype, copy=False)
        params[name] -= lr * velocity[name]


class SGD:
    def __init__(self, params: dict[str, Node], momentum: float = 0.9, clip: float | None = None):
        self.params = params
        self.momentum = momentum
        self.clip = clip
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        sgd_momentum_step({n: p.data for n, p in self.params.items()}, grads, self.velocity,
                          lr, self.momentum, self.clip)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def init_params(config: ModelConfig, n_words: int, n_chars: int, n_labels: int, rng: np.random.Generator,
                dtype=np.float32, word_embeddings: np.ndarray | None = None) -> dict[str, Node]:
    """Kaiming-uniform weights and embeddings, zero biases and transitions, zero PAD rows."""
    params = {}
    for name, (shape, fan_in) in param_shapes(config, n_words, n_chars, n_labels).items():
        if fan_in is None:
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = kaiming_uniform(rng, shape, fan_in, dtype)
        params[name] = Node(arr, requires_grad=True, name=name)
    if word_embeddings is not None:
        if word_embeddings.shape != params["word_embedding"].shape:
            raise ValueError(f"embedding matrix {word_embeddings.shape} != {params['word_embedding'].shape}")
        params["word_embedding"].data[...] = word_embeddings
    params["word_embedding"].data[PAD] = 0
    params["char_embedding"].data[PAD] = 0
    return params


def new_model(config: TrainConfig, vocab: Vocab, rng: np.random.Generator,
              word_embeddings: np.ndarray | None = None) -> GRNTagger:
    params = init_params(config.model, len(vocab.word_to_id), len(vocab.char_to_id), len(vocab.label_to_id),
                         rng, config.dtype, word_embeddings)
    return GRNTagger(config.model, params, vocab.id_to_label)


def batches(sentences: Sequence[Sentence], size: int) -> list[list[Sentence]]:
    return [list(sentences[i:i + size]) for i in range(0, len(sentences), size)]


def predict(model: GRNTagger, sentences: Sequence[Sentence], vocab: Vocab, batch_size: int = 32) -> list[list[str]]:
    out = []
    for chunk in batches(sentences, batch_size):
        out.extend(model.predict(encode_batch(chunk, vocab, with_labels=False)))
    return out


def evaluate(model: GRNTagger, sentences: Sequence[Sentence], vocab: Vocab, scheme: str = "BIO",
             batch_size: int = 32) -> tuple[float, float, float]:
    gold = [convert_scheme(s.labels, scheme, "BIO") for s in sentences]
    return span_prf(gold, predict(model, sentences, vocab, batch_size))


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab_hash: str
    labels: list[str]
    params: dict[str, np.ndarray]
    epoch: int = -1
    dev_f1: float | None = None
    version: int = CHECKPOINT_VERSION

    def model(self) -> GRNTagger:
        nodes = {k: Node(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return GRNTagger(self.config.model, nodes, self.labels)


def snapshot(model: GRNTagger, config: TrainConfig, vocab: Vocab, epoch: int, dev_f1: float | None) -> Checkpoint:
    return Checkpoint(config, vocab.fingerprint(), list(model.id_to_label),
                      {k: p.data.copy() for k, p in model.params.items()}, epoch, dev_f1)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev_p: float
    dev_r: float
    dev_f1: float
    seconds: float

    def csv(self) -> str:
        return (f"{self.epoch},{self.lr:.8g},{self.train_loss:.6f},{self.dev_p:.2f},{self.dev_r:.2f},"
                f"{self.dev_f1:.2f},{self.seconds:.3f}")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    test_prf: tuple[float, float, float] | None = None


def _param_norms(model: GRNTagger) -> str:
    return ", ".join(f"{k}={float(np.linalg.norm(p.data)):.3g}" for k, p in model.params.items())


def train(config: TrainConfig, train_set: Sequence[Sentence], vocab: Vocab,
          dev_set: Sequence[Sentence] | None = None, test_set: Sequence[Sentence] | None = None,
          word_embeddings: np.ndarray | None = None, log: TextIO | None = None,
          on_epoch: Callable[[EpochRecord, GRNTagger], None] | None = None) -> TrainResult:
    """One run of the recipe: seeded shuffle, mini-batch SGD, per-epoch dev selection.

    The returned checkpoint is the epoch with the best dev F1 (the last epoch
    when no dev set is given); ``test_prf`` is that checkpoint's test score.
    """
    if not train_set:
        raise ValueError("empty training corpus")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in seeds)
    model = new_model(config, vocab, init_rng, word_embeddings)
    opt = SGD(model.params, config.momentum, config.grad_clip)

    best: Checkpoint | None = None
    history = []
    if log is not None:
        log.write(LOG_HEADER + "\n")
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config.lr0, config.rho)
        order = shuffle_rng.permutation(len(train_set))
        total = 0.0
        for bi, chunk in enumerate(batches([train_set[i] for i in order], config.batch_size)):
            batch = encode_batch(chunk, vocab, config.scheme)
            g = Graph(rng=dropout_rng)
            loss = model.loss(g, batch, training=True)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {bi}; "
                                       f"parameter norms: {_param_norms(model)}")
            opt.zero_grad()
            g.backward(loss)
            opt.step(lr)
            total += value
        dev_p = dev_r = dev_f = float("nan")
        if dev_set:
            dev_p, dev_r, dev_f = evaluate(model, dev_set, vocab, config.scheme, config.eval_batch_size)
        rec = EpochRecord(epoch, lr, total, dev_p, dev_r, dev_f, time.perf_counter() - t0)
        history.append(rec)
        if log is not None:
            log.write(rec.csv() + "\n")
            log.flush()
        logger.info("epoch %d lr %.5f loss %.4f dev F1 %.2f", epoch, lr, total, dev_f)
        if on_epoch is not None:
            on_epoch(rec, model)
        if not dev_set or best is None or dev_f > (best.dev_f1 or 0.0):
            best = snapshot(model, config, vocab, epoch, None if not dev_set else dev_f)

    result = TrainResult(best, history)
    if test_set:
        result.test_prf = evaluate(best.model(), test_set, vocab, config.scheme, config.eval_batch_size)
    return result


def train_runs(config: TrainConfig, train_set, vocab, dev_set=None, test_set=None, word_embeddings=None,
               runs: int | None = None, log_dir: Path | None = None) -> tuple[list[TrainResult], dict]:
    """Repeat :func:`train` with seeds ``seed, seed+1, ...`` and aggregate test scores."""
    runs = config.runs if runs is None else runs
    results = []
    for k in range(runs):
        cfg = config.replace(seed=config.seed + k)
        if log_dir is not None:
            with open(Path(log_dir) / f"train_run{k}.log", "w") as fh:
                results.append(train(cfg, train_set, vocab, dev_set, test_set, word_embeddings, fh))
        else:
            results.append(train(cfg, train_set, vocab, dev_set, test_set, word_embeddings))
    return results, summarize(results)


def summarize(results: Sequence[TrainResult]) -> dict:
    out: dict = {"runs": []}
    for r in results:
        entry = {"seed": r.checkpoint.config.seed, "best_epoch": r.checkpoint.epoch, "dev_f1": r.checkpoint.dev_f1}
        if r.test_prf is not None:
            entry.update(dict(zip(("test_p", "test_r", "test_f1"), r.test_prf)))
        out["runs"].append(entry)
    for key in ("test_p", "test_r", "test_f1", "dev_f1"):
        vals = [e[key] for e in out["runs"] if e.get(key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Magic, little-endian u32 header length, JSON header, raw parameter payload."""
    entries, chunks = [], []
    for name, arr in ckpt.params.items():
        dt = "<f4" if arr.dtype == np.float32 else "<f8"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    payload = b"".join(chunks)
    header = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "labels": ckpt.labels,
        "epoch": ckpt.epoch,
        "dev_f1": ckpt.dev_f1,
        "params": entries,
        "payload_bytes": len(payload),
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def load_checkpoint(path: str | Path, vocab: Vocab | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    if len(blob) < off + 4:
        raise CheckpointError(f"{path}: truncated header (checksum cannot be verified)")
    (hlen,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    payload = blob[off + hlen:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (file truncated or corrupt)")
    if vocab is not None and vocab.fingerprint() != header["vocab_hash"]:
        raise VocabMismatchError(f"{path}: checkpoint was trained with a different vocabulary")
    params, pos = {}, 0
    for e in header["params"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        params[e["name"]] = np.frombuffer(payload[pos:pos + n], dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
        pos += n
    return Checkpoint(TrainConfig.from_dict(header["config"]), header["vocab_hash"], header["labels"], params,
                      header["epoch"], header["dev_f1"], header["version"])
