"""Adam training loop over caption/feature batches with deterministic
checkpointing and resumption.

All randomness (parameter init, per-epoch shuffling) is a pure function of
the configured seed, so a resumed run continues an uninterrupted run exactly.
Visual features are frozen: they enter the graph as constants and never
receive gradient buffers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import alignment as A
from .concepts import build_concept_vocab, extract_concepts, span_to_token_indices
from .concepts import ConceptVocabulary
from .data import read_captions, read_feature_store
from .encoder import EncoderConfig, TextEncoder, Vocabulary, build_vocab, tokenize

CHECKPOINT_MAGIC = b"DACK"
CHECKPOINT_VERSION = 1


class EpochError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    features: str = ""
    captions: str = ""
    out_dir: str = ""
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 1
    lam: float = 1.0
    tau: float = 0.1
    seed: int = 0
    clip_norm: float = 1.0
    cosine_lr: bool = False
    vocab_min_freq: int = 1
    concept_min_freq: int = 1
    d_t: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 32
    d_out: int = 0  # 0 = match the feature store's d_v
    resume: str = ""

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (global loss needs negatives)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


# --------------------------------------------------------------------------
# Adam


def init_adam_state(params):
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"NaN/Inf gradient for parameter {name!r}")
    state["step"] += 1
    t = state["step"]
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def clip_gradients(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# --------------------------------------------------------------------------
# checkpoint: magic "DACK", u32 version, then length-prefixed named f64 arrays
# (u32 name_len, name, u32 ndim, u32 dims..., f64 data), all little-endian.


def write_checkpoint(arrays, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            ident = name.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    arrays = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        arrays[name] = arr.copy()
    return arrays


# --------------------------------------------------------------------------
# model bundle


class Model:
    """Encoder + alignment head with a unified parameter namespace."""

    def __init__(self, enc_config, num_concepts, lam, tau, seed):
        self.encoder = TextEncoder(enc_config, seed=seed)
        self.head = A.AlignmentHead(
            num_concepts, enc_config.d_out, seed=seed + 1, lam=lam, tau=tau
        )

    def parameters(self):
        params = {f"enc.{k}": v for k, v in self.encoder.parameters().items()}
        params.update(self.head.parameters())
        return params


def model_arrays(model, config, epoch, step, adam_state):
    arrays = {
        "meta.epoch": np.float64(epoch),
        "meta.step": np.float64(step),
        "meta.adam_step": np.float64(adam_state["step"]),
        "meta.num_concepts": np.float64(model.head.h.data.shape[0]),
    }
    for key in (
        "lr", "beta1", "beta2", "eps", "batch_size", "epochs", "lam", "tau",
        "seed", "clip_norm", "cosine_lr", "vocab_min_freq", "concept_min_freq",
        "d_t", "n_layers", "n_heads", "max_len", "d_out",
    ):
        arrays[f"config.{key}"] = np.float64(getattr(config, key))
    arrays["config.vocab_size"] = np.float64(model.encoder.config.vocab_size)
    for name, p in model.parameters().items():
        arrays[f"param.{name}"] = p.data
        arrays[f"adam.m.{name}"] = adam_state["m"][name]
        arrays[f"adam.v.{name}"] = adam_state["v"][name]
    return arrays


def model_from_arrays(arrays):
    """Rebuild (model, config, epoch, adam_state) from checkpoint arrays."""
    cfg = TrainConfig(
        lr=float(arrays["config.lr"]),
        beta1=float(arrays["config.beta1"]),
        beta2=float(arrays["config.beta2"]),
        eps=float(arrays["config.eps"]),
        batch_size=int(arrays["config.batch_size"]),
        epochs=int(arrays["config.epochs"]),
        lam=float(arrays["config.lam"]),
        tau=float(arrays["config.tau"]),
        seed=int(arrays["config.seed"]),
        clip_norm=float(arrays["config.clip_norm"]),
        cosine_lr=bool(arrays["config.cosine_lr"]),
        vocab_min_freq=int(arrays["config.vocab_min_freq"]),
        concept_min_freq=int(arrays["config.concept_min_freq"]),
        d_t=int(arrays["config.d_t"]),
        n_layers=int(arrays["config.n_layers"]),
        n_heads=int(arrays["config.n_heads"]),
        max_len=int(arrays["config.max_len"]),
        d_out=int(arrays["config.d_out"]),
    )
    enc_config = EncoderConfig(
        d_t=cfg.d_t,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        max_len=cfg.max_len,
        vocab_size=int(arrays["config.vocab_size"]),
        d_out=cfg.d_out,
    )
    model = Model(enc_config, int(arrays["meta.num_concepts"]), cfg.lam, cfg.tau,
                  cfg.seed)
    params = model.parameters()
    adam_state = init_adam_state(params)
    adam_state["step"] = int(arrays["meta.adam_step"])
    for name, p in params.items():
        p.data = arrays[f"param.{name}"].copy()
        adam_state["m"][name] = arrays[f"adam.m.{name}"].copy()
        adam_state["v"][name] = arrays[f"adam.v.{name}"].copy()
    return model, cfg, int(arrays["meta.epoch"]), adam_state


def load_model(checkpoint_path, vocab_path=None, concepts_path=None):
    """Load a trained model plus its sibling vocabulary files."""
    ckpt_path = Path(checkpoint_path)
    arrays = read_checkpoint(ckpt_path)
    model, cfg, epoch, adam_state = model_from_arrays(arrays)
    vocab_path = Path(vocab_path) if vocab_path else ckpt_path.parent / "vocab.txt"
    concepts_path = (
        Path(concepts_path) if concepts_path else ckpt_path.parent / "concepts.txt"
    )
    vocab = Vocabulary.load(vocab_path)
    concept_vocab = (
        ConceptVocabulary.load(concepts_path) if concepts_path.exists() else None
    )
    return model, cfg, vocab, concept_vocab


# --------------------------------------------------------------------------
# training


def _collect_concepts(captions, toks, concept_vocab, corpus_words):
    """Per caption: (caption index, token index set, concept label) triples."""
    items = []
    per_caption = []
    for i, (cap, tok) in enumerate(zip(captions, toks)):
        count = 0
        for np_ in extract_concepts(cap, corpus_words):
            if np_.head not in concept_vocab:
                continue
            idx = span_to_token_indices(np_, tok)
            if not idx:
                continue
            items.append((i, idx, concept_vocab.label_of[np_.head]))
            count += 1
        per_caption.append(count)
    return items, per_caption


def train_step(model, batch, vocab, concept_vocab, corpus_words, config,
               adam_state, lr):
    """One forward/backward/update over a list of (caption, feature) pairs."""
    captions = [c.caption for c, _ in batch]
    toks = [tokenize(c, vocab, config.max_len) for c in captions]
    z_bar_t, z_t = model.encoder.encode(toks)

    z_v_const = [T.tensor(f.patches) for _, f in batch]  # frozen: no grad
    z_bar_v = T.tensor(np.stack([f.cls for _, f in batch]))

    items, per_caption = _collect_concepts(captions, toks, concept_vocab,
                                           corpus_words)
    cvs, labels = [], []
    for i, idx, label in items:
        c_t = A.pool_text_concept(T.take(z_t, np.asarray(i), axis=0), idx)
        cvs.append(A.pool_visual_concept(z_v_const[i], c_t, model.head.tau))
        labels.append(label)

    loss_g = model.head.global_loss(z_bar_v, z_bar_t)
    loss_l = model.head.concept_loss(cvs, labels)
    loss = model.head.total(loss_g, loss_l)
    T.assert_finite(loss, "training loss")
    loss.backward()

    params = model.parameters()
    grads = {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
    clip_gradients(grads, config.clip_norm)
    adam_step(params, grads, adam_state, lr, config.beta1, config.beta2,
              config.eps)
    for p in params.values():
        p.zero_grad()

    unique_concepts = len(set(labels))
    return {
        "L_g": float(loss_g.data),
        "L_l": float(loss_l.data),
        "L_tot": float(loss.data),
        "concepts_per_caption": sum(per_caption) / len(captions),
        "unique_concepts_per_batch": unique_concepts,
    }


def epoch_batches(dataset, batch_size, seed, epoch):
    """Seeded shuffle; drops a trailing batch smaller than 2."""
    rng = np.random.default_rng(np.random.PCG64(seed * 1_000_003 + epoch))
    order = rng.permutation(len(dataset))
    batches = []
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            continue
        batches.append([dataset[i] for i in idx])
    return batches


def train_epoch(model, dataset, vocab, concept_vocab, corpus_words, config,
                adam_state, epoch, step_offset=0, log_fn=None):
    """Runs one shuffled epoch; returns mean metrics and the new step count."""
    batches = epoch_batches(dataset, config.batch_size, config.seed, epoch)
    if not batches:
        raise EpochError("no trainable batches (need at least 2 examples)")
    lr = config.lr
    if config.cosine_lr:
        lr = config.lr * 0.5 * (1 + np.cos(np.pi * epoch / max(1, config.epochs)))
    sums = {}
    step = step_offset
    for batch in batches:
        metrics = train_step(model, batch, vocab, concept_vocab, corpus_words,
                             config, adam_state, lr)
        step += 1
        if log_fn is not None:
            log_fn(epoch, step, metrics)
        for k, v in metrics.items():
            sums[k] = sums.get(k, 0.0) + v
    means = {k: v / len(batches) for k, v in sums.items()}
    return means, step


def fit(config):
    """Full training run: vocabularies, epochs, per-epoch checkpoints, metrics log.

    Returns (final checkpoint path, list of per-epoch mean metrics).
    """
    store = read_feature_store(config.features)
    captions = read_captions(config.captions)
    for rec in captions:
        if rec.image_id not in store:
            raise ValueError(f"caption image_id {rec.image_id!r} not in feature store")
    d_v = store.d_v
    if config.d_out and config.d_out != d_v:
        raise ValueError(f"d_out={config.d_out} must equal feature d_v={d_v}")
    config.d_out = d_v

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.resume:
        arrays = read_checkpoint(config.resume)
        model, _, start_epoch, adam_state = model_from_arrays(arrays)
        start_step = int(arrays["meta.step"])
        vocab = Vocabulary.load(Path(config.resume).parent / "vocab.txt")
        concept_vocab = ConceptVocabulary.load(
            Path(config.resume).parent / "concepts.txt"
        )
    else:
        texts = [c.caption for c in captions]
        vocab = build_vocab(texts, min_freq=config.vocab_min_freq)
        concept_vocab = build_concept_vocab(texts, min_freq=config.concept_min_freq)
        enc_config = EncoderConfig(
            d_t=config.d_t,
            n_layers=config.n_layers,
            n_heads=config.n_heads,
            max_len=config.max_len,
            vocab_size=len(vocab),
            d_out=d_v,
        )
        model = Model(enc_config, len(concept_vocab), config.lam, config.tau,
                      config.seed)
        adam_state = init_adam_state(model.parameters())
        start_epoch = 0
        start_step = 0

    vocab.save(out_dir / "vocab.txt")
    concept_vocab.save(out_dir / "concepts.txt")
    corpus_words = set(vocab.id_to_token[4:])

    dataset = [(c, store.get(c.image_id)) for c in captions]
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if config.resume else "w"
    epoch_means = []
    step = start_step
    with open(metrics_path, mode, encoding="utf-8") as log:

        def log_fn(epoch, step, metrics):
            line = {"epoch": epoch, "step": step}
            line.update(metrics)
            log.write(json.dumps(line, sort_keys=True) + "\n")

        for epoch in range(start_epoch, config.epochs):
            means, step = train_epoch(
                model, dataset, vocab, concept_vocab, corpus_words, config,
                adam_state, epoch, step_offset=step, log_fn=log_fn,
            )
            epoch_means.append(means)
            arrays = model_arrays(model, config, epoch + 1, step, adam_state)
            write_checkpoint(arrays, out_dir / f"checkpoint_epoch{epoch:04d}.dack")
            write_checkpoint(arrays, out_dir / "checkpoint.dack")

    return out_dir / "checkpoint.dack", epoch_means
