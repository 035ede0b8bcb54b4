"""Zero-shot segmentation inference and scoring over precomputed patch features.

Class prototypes are averaged templated-prompt embeddings. Patches are scored
by cosine similarity under a patch-space sliding window with overlap-averaged
logits, bilinearly upsampled to mask resolution, and reduced to mIoU under a
foreground protocol (ignore-index pixels excluded) or a whole-image protocol
(low-confidence pixels assigned to a background class below a threshold).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import IGNORE_INDEX, write_mask
from .encoder import tokenize

PROTOCOLS = ("foreground", "whole-image")


class ConfigError(ValueError):
    pass


class ReportError(RuntimeError):
    pass


@dataclass
class EvalConfig:
    protocol: str = "foreground"
    window: int = 0  # 0 = single window over the whole grid
    stride: int = 0  # 0 = window size
    background_threshold: float | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.window and self.stride and self.stride > self.window:
            raise ConfigError(f"stride {self.stride} must be <= window {self.window}")
        if self.protocol == "foreground" and self.background_threshold is not None:
            raise ConfigError("background threshold only applies to whole-image protocol")


@dataclass
class SegPrediction:
    labels: np.ndarray  # (H, W) int class indices
    scores: np.ndarray  # (H, W) float max similarity


@dataclass
class MIoUReport:
    per_class: dict
    miou: float
    pixels_scored: int
    protocol: str
    threshold: float | None = None

    def to_dict(self):
        out = {
            "per_class": self.per_class,
            "miou": self.miou,
            "pixels_scored": self.pixels_scored,
            "protocol": self.protocol,
        }
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")


def _normalize_rows(a):
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(norms, 1e-12)


def model_embed_fn(model, vocab, max_len=32):
    """Text -> global embedding vector using a trained encoder."""

    def embed(text):
        z_bar, _ = model.encoder.encode([tokenize(text, vocab, max_len)])
        return z_bar.data[0]

    return embed


def embed_classes(names, templates, embed_fn):
    """Per class: mean embedding over filled templates, L2-normalized (C x d)."""
    if not templates:
        raise ConfigError("need at least one prompt template")
    for t in templates:
        if "{}" not in t:
            raise ConfigError(f"template {t!r} has no {{}} placeholder")
    protos = []
    for name in names:
        vecs = np.stack([np.asarray(embed_fn(t.format(name)), dtype=np.float64)
                         for t in templates])
        protos.append(vecs.mean(axis=0))
    return _normalize_rows(np.stack(protos))


def window_starts(size, window, stride):
    """Start offsets covering [0, size); the last window is clamped to the edge."""
    if window <= 0 or window >= size:
        return [0]
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def sliding_windows(h, w, window, stride):
    """(r0, c0, r1, c1) patch-space windows covering the full grid."""
    if window <= 0:
        return [(0, 0, h, w)]
    stride = stride or window
    return [
        (r, c, min(r + window, h), min(c + window, w))
        for r in window_starts(h, window, stride)
        for c in window_starts(w, window, stride)
    ]


def bilinear_upsample(grid, out_h, out_w):
    """Half-pixel-aligned bilinear interpolation of (h, w[, C]) to (out_h, out_w[, C])."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if grid.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    g = grid
    top = g[y0][:, x0] * (1 - wx) + g[y0][:, x1] * wx
    bot = g[y1][:, x0] * (1 - wx) + g[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def predict_image(record, prototypes, out_size, config=None):
    """Cosine-score patches against prototypes and upsample to out_size.

    Overlapping sliding-window logits are averaged per patch before the
    bilinear upsample; argmax gives labels, max logit gives the score map.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.ndim != 2 or prototypes.shape[0] == 0:
        raise ConfigError("need a non-empty C x d prototype matrix")
    config = config or EvalConfig()
    h_p, w_p = record.h_p, record.w_p
    patches = _normalize_rows(record.patches).reshape(h_p, w_p, -1)
    protos = _normalize_rows(prototypes)

    logits = np.zeros((h_p, w_p, protos.shape[0]))
    counts = np.zeros((h_p, w_p, 1))
    for r0, c0, r1, c1 in sliding_windows(h_p, w_p, config.window, config.stride):
        block = patches[r0:r1, c0:c1]
        logits[r0:r1, c0:c1] += block @ protos.T
        counts[r0:r1, c0:c1] += 1
    logits /= counts

    out_h, out_w = out_size
    up = bilinear_upsample(logits, out_h, out_w)
    return SegPrediction(labels=up.argmax(axis=-1), scores=up.max(axis=-1))


def apply_background(pred, threshold, background_index):
    """Pixels scoring below the threshold are relabeled as background."""
    below = pred.scores < threshold
    labels = np.where(below, background_index, pred.labels)
    return SegPrediction(labels=labels, scores=pred.scores.copy())


def confusion_matrix(pred_labels, truth, num_classes, ignore=IGNORE_INDEX):
    """num_classes x num_classes counts, rows = truth, cols = prediction."""
    truth = np.asarray(truth)
    keep = truth != ignore
    t = truth[keep].astype(np.int64)
    p = np.asarray(pred_labels)[keep].astype(np.int64)
    return np.bincount(
        t * num_classes + p, minlength=num_classes * num_classes
    ).reshape(num_classes, num_classes)


def miou(conf, class_names, protocol="foreground", threshold=None):
    """Per-class IoU and their mean; classes absent from both sides are excluded."""
    conf = np.asarray(conf, dtype=np.int64)
    total = int(conf.sum())
    if total == 0:
        raise ReportError("zero scored pixels; nothing to evaluate")
    per_class = {}
    ious = []
    for c, name in enumerate(class_names):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        denom = tp + fp + fn
        if denom == 0:
            continue
        iou = float(tp / denom)
        per_class[name] = iou
        ious.append(iou)
    return MIoUReport(
        per_class=per_class,
        miou=float(np.mean(ious)),
        pixels_scored=total,
        protocol=protocol,
        threshold=threshold,
    )


def evaluate(records, masks, prototypes, class_names, config,
             ignore=IGNORE_INDEX, workers=1):
    """Score a set of feature records against their ground-truth masks.

    Under the whole-image protocol an extra background class (index C) is
    appended and low-confidence pixels fall back to it. Images are scored
    independently (optionally across threads) and the integer confusion
    matrices summed, so the result is order-independent.
    """
    names = list(class_names)
    background = None
    if config.protocol == "whole-image":
        if config.background_threshold is None:
            raise ConfigError("whole-image protocol requires a background threshold")
        background = len(names)
        names = names + ["background"]

    def score_one(rec):
        mask = masks[rec.image_id]
        pred = predict_image(rec, prototypes, mask.shape, config)
        if background is not None:
            pred = apply_background(pred, config.background_threshold, background)
        return confusion_matrix(pred.labels, mask, len(names), ignore)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score_one, records))
    else:
        parts = [score_one(rec) for rec in records]
    conf = sum(parts, np.zeros((len(names), len(names)), dtype=np.int64))
    return miou(conf, names, config.protocol, config.background_threshold)


def calibrate_threshold(predictions, masks, grid, num_classes, ignore=IGNORE_INDEX):
    """Threshold from the grid maximizing whole-image mIoU; ties take the lowest.

    ``predictions`` are SegPredictions without background applied; ``masks``
    are the matching ground-truth arrays where index num_classes means
    background.
    """
    if len(grid) == 0:
        raise ConfigError("calibration grid is empty")
    background = num_classes
    best_t, best_m = None, -1.0
    for t in sorted(float(g) for g in grid):
        conf = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
        for pred, mask in zip(predictions, masks):
            labeled = apply_background(pred, t, background)
            conf += confusion_matrix(labeled.labels, mask, num_classes + 1, ignore)
        score = miou(conf, [str(i) for i in range(num_classes + 1)],
                     "whole-image", t).miou
        if score > best_m:
            best_t, best_m = t, score
    return best_t


# --------------------------------------------------------------------------
# visualizations


def _min_max_bytes(values):
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def heatmap(record, concept_text, embed_fn, out_path, out_size):
    """Per-patch cosine similarity to a text concept as a grayscale PGM."""
    query = np.asarray(embed_fn(concept_text), dtype=np.float64)
    query = query / max(np.linalg.norm(query), 1e-12)
    sims = _normalize_rows(record.patches) @ query
    grid = _min_max_bytes(sims).reshape(record.h_p, record.w_p).astype(np.float64)
    up = bilinear_upsample(grid, *out_size)
    img = np.clip(np.rint(up), 0, 255).astype(np.uint8)
    write_mask(img, out_path)
    return img


def write_ppm(image, path):
    """Binary PPM (P6), 8-bit RGB."""
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def pca_components(patches, k=3):
    """Top-k principal directions (d x k) and the centered projections (n x k)."""
    if patches.shape[0] < k:
        raise ValueError(f"need at least {k} patches for PCA, got {patches.shape[0]}")
    centered = patches - patches.mean(axis=0)
    cov = centered.T @ centered / patches.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, ::-1][:, :k]  # eigh is ascending; take the top k
    return components, centered @ components


def pca_rgb(record, out_path, out_size):
    """Top-3 principal components of the patch features as an RGB PPM."""
    _, projected = pca_components(record.patches, 3)
    channels = np.stack(
        [_min_max_bytes(projected[:, i]).astype(np.float64) for i in range(3)],
        axis=-1,
    ).reshape(record.h_p, record.w_p, 3)
    up = bilinear_upsample(channels, *out_size)
    img = np.clip(np.rint(up), 0, 255).astype(np.uint8)
    write_ppm(img, out_path)
    return img
