"""Scikit-learn style facade over training and zero-shot segmentation.

DenseAligner.fit trains the text encoder against a directory (or explicit
file pair) of frozen visual features and captions. transform embeds raw
caption strings, predict produces per-image patch label grids for the
concepts discovered during fitting, and score reports foreground mIoU
against ground-truth masks.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import segeval as S
from . import trainer as TR
from .data import DEFAULT_TEMPLATES, read_feature_store
from .encoder import tokenize


class DenseAligner(BaseEstimator):
    def __init__(self, epochs=1, batch_size=64, lr=3e-4, lam=1.0, tau=0.1,
                 seed=0, d_t=128, n_layers=4, n_heads=4, max_len=32,
                 clip_norm=1.0, cosine_lr=False, vocab_min_freq=1,
                 concept_min_freq=1, templates=None, work_dir=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lam = lam
        self.tau = tau
        self.seed = seed
        self.d_t = d_t
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_len = max_len
        self.clip_norm = clip_norm
        self.cosine_lr = cosine_lr
        self.vocab_min_freq = vocab_min_freq
        self.concept_min_freq = concept_min_freq
        self.templates = templates
        self.work_dir = work_dir

    @staticmethod
    def _resolve_inputs(X):
        if isinstance(X, (tuple, list)) and len(X) == 2:
            features, captions = map(Path, X)
        else:
            root = Path(X)
            features = root / "features.dvf"
            captions = root / "captions.jsonl"
        for p in (features, captions):
            if not p.exists():
                raise FileNotFoundError(f"missing input: {p}")
        return features, captions

    def fit(self, X, y=None):
        """Train on a world directory or a (features, captions) path pair."""
        features, captions = self._resolve_inputs(X)
        out_dir = self.work_dir or tempfile.mkdtemp(prefix="densealign-")
        config = TR.TrainConfig(
            features=str(features), captions=str(captions), out_dir=str(out_dir),
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            lam=self.lam, tau=self.tau, seed=self.seed,
            clip_norm=self.clip_norm, cosine_lr=self.cosine_lr,
            vocab_min_freq=self.vocab_min_freq,
            concept_min_freq=self.concept_min_freq,
            d_t=self.d_t, n_layers=self.n_layers, n_heads=self.n_heads,
            max_len=self.max_len,
        )
        self.checkpoint_, self.history_ = TR.fit(config)
        self.model_, _, self.vocab_, self.concept_vocab_ = TR.load_model(
            self.checkpoint_
        )
        self.classes_ = list(self.concept_vocab_.concepts)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("DenseAligner is not fitted; call fit first")

    def _embed_fn(self):
        return S.model_embed_fn(self.model_, self.vocab_, self.max_len)

    def _prototypes(self, classes=None):
        names = list(classes) if classes is not None else self.classes_
        templates = self.templates or DEFAULT_TEMPLATES
        return names, S.embed_classes(names, templates, self._embed_fn())

    def transform(self, X):
        """Embed a list of caption strings into the aligned space (n x d)."""
        self._check_fitted()
        toks = [tokenize(text, self.vocab_, self.max_len) for text in X]
        z_bar, _ = self.model_.encoder.encode(toks)
        return z_bar.data.copy()

    def _records(self, X):
        if isinstance(X, (str, Path)):
            return read_feature_store(X).records
        return list(X)

    def predict(self, X, classes=None):
        """Patch-resolution label grids for feature records or a store path."""
        self._check_fitted()
        _, protos = self._prototypes(classes)
        out = []
        for rec in self._records(X):
            pred = S.predict_image(rec, protos, (rec.h_p, rec.w_p))
            out.append(pred.labels)
        return out

    def score(self, X, y, classes=None):
        """Foreground mIoU of predictions against masks keyed by image id."""
        self._check_fitted()
        records = self._records(X)
        names, protos = self._prototypes(classes)
        report = S.evaluate(records, y, protos, names, S.EvalConfig())
        return report.miou
