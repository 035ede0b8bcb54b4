"""Feature export and caption generation pipelines.

Both walk the image directory in sorted filename order, skip files that
cannot be read (with a warning on the log stream), and write their output
atomically. Caption generation caches results on disk keyed by a hash of
(image bytes, prompt), so reruns over an unchanged corpus perform zero
model calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

from .config import AdapterConfig, AdapterError
from .formats import write_caption_jsonl, write_feature_store
from .models import load_backbone, load_vlm

log = logging.getLogger("densealign_adapters")


def list_images(config: AdapterConfig):
    """Sorted (image_id, path) pairs for recognized files in image_dir."""
    root = Path(config.image_dir)
    if not root.is_dir():
        raise AdapterError(f"image directory not found: {root}")
    pairs = []
    for path in sorted(root.iterdir()):
        if path.suffix.lower() in config.extensions:
            pairs.append((path.stem, path))
    if not pairs:
        raise AdapterError(f"no image files with {config.extensions} under {root}")
    return pairs


def _read_images(pairs):
    """Yield (image_id, bytes), warning and skipping unreadable files."""
    for image_id, path in pairs:
        try:
            yield image_id, path.read_bytes()
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)


def export_features(config: AdapterConfig, backbone=None):
    """Extract frozen patch features for every readable image.

    Returns {"written": n, "skipped": n, "d_v": d}. Zero successful
    extractions is an error: an empty store almost always means a wrong
    directory or a broken backbone, not an empty dataset.
    """
    if not config.features_out:
        raise AdapterError("features_out is required for export_features")
    if backbone is None:
        backbone = load_backbone(config.backbone, config.device)

    pairs = list_images(config)
    records = []
    for image_id, blob in _read_images(pairs):
        h_p, w_p, cls, patches = backbone.extract(blob)
        records.append((image_id, h_p, w_p, cls, patches))

    if not records:
        raise AdapterError(f"no readable images under {config.image_dir}")
    write_feature_store(records, backbone.d_v, config.features_out)
    skipped = len(pairs) - len(records)
    log.info("wrote %d feature records (%d skipped) to %s",
             len(records), skipped, config.features_out)
    return {"written": len(records), "skipped": skipped, "d_v": backbone.d_v}


def _cache_key(blob, prompt):
    h = hashlib.sha256()
    h.update(blob)
    h.update(b"\x00")
    h.update(prompt.encode("utf-8"))
    return h.hexdigest()


class CaptionCache:
    """Disk cache of generated captions, one JSON file per (image, prompt)."""

    def __init__(self, directory):
        self.directory = Path(directory) if directory else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, key):
        if self.directory is None:
            return None
        path = self.directory / f"{key}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["caption"]

    def put(self, key, caption):
        if self.directory is None:
            return
        path = self.directory / f"{key}.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({"caption": caption}), encoding="utf-8")
        os.replace(tmp, path)


def generate_captions(config: AdapterConfig, vlm=None):
    """Generate one caption per readable image, using the disk cache.

    Returns {"written", "skipped", "cache_hits", "model_calls"}. Generation
    failures skip the record with a warning rather than aborting the run.
    """
    if not config.captions_out:
        raise AdapterError("captions_out is required for generate_captions")
    if vlm is None:
        vlm = load_vlm(config.vlm, config.max_tokens, config.temperature,
                       config.seed, config.device)

    cache = CaptionCache(config.cache_dir)
    pairs = list_images(config)
    records = []
    cache_hits = model_calls = failures = 0
    for image_id, blob in _read_images(pairs):
        key = _cache_key(blob, config.prompt)
        caption = cache.get(key)
        if caption is not None:
            cache_hits += 1
        else:
            try:
                caption = vlm.generate(blob, config.prompt)
            except Exception as exc:
                log.warning("caption generation failed for %s: %s", image_id, exc)
                failures += 1
                continue
            model_calls += 1
            cache.put(key, caption)
        records.append((image_id, caption, config.prompt, "synthetic"))

    if not records:
        raise AdapterError(f"no captions generated for {config.image_dir}")
    write_caption_jsonl(records, config.captions_out)
    skipped = len(pairs) - len(records)
    log.info("wrote %d caption records (%d skipped, %d cache hits, %d model calls) to %s",
             len(records), skipped, cache_hits, model_calls, config.captions_out)
    return {
        "written": len(records),
        "skipped": skipped,
        "cache_hits": cache_hits,
        "model_calls": model_calls,
    }
