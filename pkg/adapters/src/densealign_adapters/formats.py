"""Writers for the ingestion file formats the training package reads.

Implemented independently of the training package on purpose: the binary
layout and the JSONL shape are the contract between the two, and keeping
a second implementation here means a format drift on either side shows up
as a golden-byte test failure instead of silent corruption.

Feature store layout (all little-endian):
    magic "DVF1", u32 version=1, u32 d_v, u64 record_count,
    then per record: u32 id_len, id UTF-8, u16 h_p, u16 w_p,
    f32 cls[d_v], f32 patches[h_p*w_p*d_v].

Caption store: UTF-8 JSONL, one object per line with keys
    image_id, caption, prompt, source (sorted).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager

import numpy as np

MAGIC = b"DVF1"
VERSION = 1


@contextmanager
def _atomic_open(path, mode):
    """Write to a sibling temp file, then atomically rename over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        encoding = None if "b" in mode else "utf-8"
        with os.fdopen(fd, mode, encoding=encoding) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_feature_store(records, d_v, path):
    """Write (image_id, h_p, w_p, cls, patches) tuples as a feature store.

    `cls` has shape (d_v,); `patches` has shape (h_p*w_p, d_v). Values are
    emitted as float32, matching the on-disk precision directly.
    """
    with _atomic_open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIQ", VERSION, int(d_v), len(records)))
        for image_id, h_p, w_p, cls, patches in records:
            cls = np.asarray(cls, dtype="<f4")
            patches = np.asarray(patches, dtype="<f4")
            if cls.shape != (d_v,):
                raise ValueError(
                    f"record {image_id!r}: cls shape {cls.shape} != ({d_v},)"
                )
            if patches.shape != (h_p * w_p, d_v):
                raise ValueError(
                    f"record {image_id!r}: patches shape {patches.shape}"
                    f" != ({h_p * w_p}, {d_v})"
                )
            ident = image_id.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<HH", int(h_p), int(w_p)))
            f.write(cls.tobytes())
            f.write(patches.tobytes())


def write_caption_jsonl(records, path):
    """Write (image_id, caption, prompt, source) tuples as caption JSONL."""
    with _atomic_open(path, "w") as f:
        for image_id, caption, prompt, source in records:
            f.write(
                json.dumps(
                    {
                        "image_id": image_id,
                        "caption": caption,
                        "prompt": prompt,
                        "source": source,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
