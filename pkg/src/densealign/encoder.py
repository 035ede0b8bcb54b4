"""Word-level tokenizer and a small causal transformer text encoder.

The encoder follows the CLIP text-tower layout (pre-norm blocks, causal
self-attention, GELU MLP, learned positional embeddings) and emits both a
dense per-token representation and a global representation taken at the EOS
position. It is the only trainable network in the pipeline.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ["<bos>", "<eos>", "<pad>", "<unk>"]

_WORD_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


class InputError(ValueError):
    pass


def split_words(text):
    """Lowercased word tokens with [start, end) char spans in the source text.

    Words are maximal alphanumeric runs; punctuation is split off as
    separate single-char tokens.
    """
    lowered = text.lower()
    return [(m.group(0), (m.start(), m.end())) for m in _WORD_RE.finditer(lowered)]


class Vocabulary:
    """Bijective token <-> id map with four leading special ids."""

    def __init__(self, tokens):
        self.id_to_token = SPECIAL_TOKENS + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise InputError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id_of(self, token):
        return self.token_to_id.get(token, UNK)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            lines = [ln.rstrip("\n") for ln in f]
        if lines[:4] != SPECIAL_TOKENS:
            raise InputError(f"vocabulary file {path} does not start with special tokens")
        return cls(lines[4:])


def build_vocab(corpus, min_freq=1, max_size=None):
    """Frequency-then-alphabetical word vocabulary over an iterable of captions.

    ``max_size`` caps the total vocabulary size including the 4 specials.
    """
    counts = {}
    seen_any = False
    for caption in corpus:
        seen_any = True
        for word, _ in split_words(caption):
            counts[word] = counts.get(word, 0) + 1
    if not seen_any:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    if max_size is not None:
        kept = kept[: max(0, max_size - len(SPECIAL_TOKENS))]
    return Vocabulary(kept)


@dataclass
class TokenizedCaption:
    """Token ids (BOS ... EOS) plus per non-special token char spans."""

    ids: list
    char_spans: list
    text: str = ""

    @property
    def eos_position(self):
        return len(self.ids) - 1


def tokenize(caption, vocab, max_len=32):
    """BOS + word ids (UNK for OOV) + EOS, truncated so EOS is always present."""
    words = split_words(caption)[: max_len - 2]
    ids = [BOS] + [vocab.id_of(w) for w, _ in words] + [EOS]
    spans = [span for _, span in words]
    return TokenizedCaption(ids=ids, char_spans=spans, text=caption)


@dataclass
class EncoderConfig:
    d_t: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 32
    vocab_size: int = 0
    d_out: int = 64

    def __post_init__(self):
        if self.d_t % self.n_heads != 0:
            raise InputError(f"d_t={self.d_t} not divisible by n_heads={self.n_heads}")
        if self.max_len < 4:
            raise InputError(f"max_len must be >= 4, got {self.max_len}")


class TextEncoder:
    """Causal transformer; EOS token carries the global representation."""

    def __init__(self, config: EncoderConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(np.random.PCG64(seed))
        c = config
        self.params = {}

        def param(name, shape, init="normal"):
            if init == "normal":
                data = rng.normal(0.0, 0.02, size=shape)
            elif init == "zeros":
                data = np.zeros(shape)
            elif init == "ones":
                data = np.ones(shape)
            else:
                raise ValueError(init)
            t = T.tensor(data, requires_grad=True)
            self.params[name] = t
            return t

        param("tok_emb", (c.vocab_size, c.d_t))
        param("pos_emb", (c.max_len, c.d_t))
        for i in range(c.n_layers):
            p = f"block{i}."
            param(p + "ln1_g", (c.d_t,), "ones")
            param(p + "ln1_b", (c.d_t,), "zeros")
            for w in ("wq", "wk", "wv", "wo"):
                param(p + w, (c.d_t, c.d_t))
            for b in ("bq", "bk", "bv", "bo"):
                param(p + b, (c.d_t,), "zeros")
            param(p + "ln2_g", (c.d_t,), "ones")
            param(p + "ln2_b", (c.d_t,), "zeros")
            param(p + "w1", (c.d_t, 4 * c.d_t))
            param(p + "b1", (4 * c.d_t,), "zeros")
            param(p + "w2", (4 * c.d_t, c.d_t))
            param(p + "b2", (c.d_t,), "zeros")
        param("ln_f_g", (c.d_t,), "ones")
        param("ln_f_b", (c.d_t,), "zeros")
        param("proj_w", (c.d_t, c.d_out))
        param("proj_b", (c.d_out,), "zeros")

    def parameters(self):
        return self.params

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def _pad_batch(self, batch):
        n = max(len(t.ids) for t in batch)
        ids = np.full((len(batch), n), PAD, dtype=np.int64)
        eos_pos = np.zeros(len(batch), dtype=np.int64)
        for i, t in enumerate(batch):
            ids[i, : len(t.ids)] = t.ids
            eos_pos[i] = t.eos_position
        return ids, eos_pos

    def encode(self, batch):
        """Returns (global b x d, dense b x n x d) for a list of TokenizedCaptions."""
        c = self.config
        ids, eos_pos = self._pad_batch(batch)
        if ids.max() >= c.vocab_size:
            raise IndexError(
                f"token id {ids.max()} out of range for vocab_size {c.vocab_size}"
            )
        b, n = ids.shape
        p = self.params

        x = T.add(T.take(p["tok_emb"], ids), T.take(p["pos_emb"], np.arange(n)))

        # additive mask: causal plus PAD keys excluded, applied to all heads
        causal = np.triu(np.full((n, n), -1e9), k=1)
        pad_keys = np.where(ids == PAD, -1e9, 0.0)[:, None, None, :]
        mask = T.tensor(causal[None, None, :, :] + pad_keys)

        nh, dh = c.n_heads, c.d_t // c.n_heads
        scale = T.tensor(1.0 / np.sqrt(dh))

        def heads(t):
            return T.swapaxes(T.reshape(t, (b, n, nh, dh)), 1, 2)

        for i in range(c.n_layers):
            pre = f"block{i}."
            h = T.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = heads(T.add(T.matmul(h, p[pre + "wq"]), p[pre + "bq"]))
            k = heads(T.add(T.matmul(h, p[pre + "wk"]), p[pre + "bk"]))
            v = heads(T.add(T.matmul(h, p[pre + "wv"]), p[pre + "bv"]))
            scores = T.add(T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale), mask)
            attn = T.matmul(T.softmax(scores, axis=-1), v)
            merged = T.reshape(T.swapaxes(attn, 1, 2), (b, n, c.d_t))
            x = T.add(x, T.add(T.matmul(merged, p[pre + "wo"]), p[pre + "bo"]))

            h = T.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            h = T.gelu(T.add(T.matmul(h, p[pre + "w1"]), p[pre + "b1"]))
            x = T.add(x, T.add(T.matmul(h, p[pre + "w2"]), p[pre + "b2"]))

        x = T.layer_norm(x, p["ln_f_g"], p["ln_f_b"])
        z_t = T.add(T.matmul(x, p["proj_w"]), p["proj_b"])
        z_bar = T.take_pairs(z_t, np.arange(b), eos_pos)
        return z_bar, z_t
