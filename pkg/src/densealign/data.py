"""The frozen-model boundary: feature/caption stores, masks, class sets,
and the synthetic-world generator used as the acceptance oracle.

On-disk feature values are little-endian float32; everything is float64 in
memory. Masks are 8-bit binary PGM (P5) with 255 as the ignore sentinel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .concepts import CONJUNCTIONS, PREPOSITIONS, extract_concepts
from .encoder import split_words

FEATURE_MAGIC = b"DVF1"
FEATURE_VERSION = 1
IGNORE_INDEX = 255


class FormatError(ValueError):
    pass


class SpecError(ValueError):
    pass


# --------------------------------------------------------------------------
# feature store


@dataclass
class FeatureRecord:
    image_id: str
    h_p: int
    w_p: int
    cls: np.ndarray  # (d_v,)
    patches: np.ndarray  # (h_p * w_p, d_v), row-major over the patch grid

    @property
    def n_patches(self):
        return self.h_p * self.w_p


class FeatureStore:
    """In-memory packed visual-feature records keyed by unique image id."""

    def __init__(self, d_v, records=()):
        self.d_v = int(d_v)
        self.records = []
        self._by_id = {}
        for r in records:
            self.add(r)

    def add(self, record):
        if record.image_id in self._by_id:
            raise FormatError(f"duplicate image_id {record.image_id!r}")
        if record.patches.shape != (record.h_p * record.w_p, self.d_v):
            raise FormatError(
                f"record {record.image_id!r}: patches shape {record.patches.shape} "
                f"!= ({record.h_p * record.w_p}, {self.d_v})"
            )
        self._by_id[record.image_id] = record
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __contains__(self, image_id):
        return image_id in self._by_id

    def get(self, image_id):
        return self._by_id[image_id]


def write_feature_store(store, path):
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIQ", FEATURE_VERSION, store.d_v, len(store)))
        for r in store.records:
            ident = r.image_id.encode("utf-8")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<HH", r.h_p, r.w_p))
            f.write(np.asarray(r.cls, dtype="<f4").tobytes())
            f.write(np.asarray(r.patches, dtype="<f4").tobytes())


def read_feature_store(path):
    raw = Path(path).read_bytes()
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated {what} at byte offset {off} in {path}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    magic = need(4, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0 in {path}")
    version, d_v, count = struct.unpack("<IIQ", need(16, "header"))
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature store version {version}")
    store = FeatureStore(d_v)
    for _ in range(count):
        rec_off = off
        (id_len,) = struct.unpack("<I", need(4, "record id length"))
        ident = need(id_len, "record id").decode("utf-8")
        h_p, w_p = struct.unpack("<HH", need(4, "record grid dims"))
        cls = np.frombuffer(need(4 * d_v, "record cls"), dtype="<f4").astype(np.float64)
        n = h_p * w_p
        patches = np.frombuffer(
            need(4 * n * d_v, "record patches"), dtype="<f4"
        ).astype(np.float64).reshape(n, d_v)
        try:
            store.add(FeatureRecord(ident, h_p, w_p, cls, patches))
        except FormatError as e:
            raise FormatError(f"{e} (record at byte offset {rec_off})") from None
    return store


# --------------------------------------------------------------------------
# captions


@dataclass
class CaptionRecord:
    image_id: str
    caption: str
    prompt: str = ""
    source: str = "raw"


def read_captions(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            try:
                records.append(
                    CaptionRecord(
                        image_id=obj["image_id"],
                        caption=obj["caption"],
                        prompt=obj.get("prompt", ""),
                        source=obj.get("source", "raw"),
                    )
                )
            except KeyError as e:
                raise FormatError(f"{path}:{lineno}: missing key {e}") from None
    return records


def write_captions(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "image_id": r.image_id,
                        "caption": r.caption,
                        "prompt": r.prompt,
                        "source": r.source,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


# --------------------------------------------------------------------------
# masks (binary PGM) and class sets


def write_mask(mask, path):
    mask = np.asarray(mask)
    if mask.dtype != np.uint8:
        if mask.min() < 0 or mask.max() > 255:
            raise FormatError("mask values must fit in a byte")
        mask = mask.astype(np.uint8)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(mask.tobytes())


def read_mask(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, then a single whitespace byte
    tokens = []
    off = 0
    while len(tokens) < 4:
        while off < len(raw) and raw[off : off + 1].isspace():
            off += 1
        if raw[off : off + 1] == b"#":
            while off < len(raw) and raw[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(raw) and not raw[off : off + 1].isspace():
            off += 1
        tokens.append(raw[start:off])
    off += 1
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: PGM maxval must be 255, got {maxval}")
    data = raw[off : off + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated pixel data at byte offset {off}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


@dataclass
class ClassSet:
    classes: list
    templates: list
    background_threshold: float | None = None

    @classmethod
    def load(cls, path):
        obj = json.loads(Path(path).read_text("utf-8"))
        return cls(
            classes=list(obj["classes"]),
            templates=list(obj["templates"]),
            background_threshold=obj.get("background_threshold"),
        )

    def save(self, path):
        obj = {"classes": self.classes, "templates": self.templates}
        if self.background_threshold is not None:
            obj["background_threshold"] = self.background_threshold
        Path(path).write_text(json.dumps(obj, indent=1) + "\n", "utf-8")


# --------------------------------------------------------------------------
# synthetic world

# Prompt ensemble for class prototypes; averaging embeddings over several
# contexts cancels the context-specific component of each prompt.
DEFAULT_TEMPLATES = [
    "a photo of a {}.",
    "a blurry photo of a {}.",
    "a dark photo of a {}.",
    "a bright photo of a {}.",
    "a photo of a small {}.",
    "a photo of a big {}.",
    "a cropped photo of a {}.",
]

# Single template used to synthesize captions.
CAPTION_TEMPLATES = ["a photo of a {}."]


@dataclass
class SyntheticWorldSpec:
    concepts: list
    d_v: int = 16
    grid: tuple = (16, 16)
    regions_per_image: int = 2
    sigma: float = 0.05
    templates: list = field(default_factory=lambda: list(CAPTION_TEMPLATES))
    image_count: int = 64
    seed: int = 0
    mask_scale: int = 4  # pixels per patch side in emitted masks
    mean_mix: float = 0.0  # 0 = orthonormal means, 1 = independent unit vectors

    def __post_init__(self):
        if len(self.concepts) > 26:
            raise SpecError("at most 26 named concepts")
        if len(self.concepts) > self.d_v:
            raise SpecError(
                f"{len(self.concepts)} concepts cannot be orthonormal in d_v={self.d_v}"
            )
        if self.regions_per_image > self.grid[0] * self.grid[1]:
            raise SpecError("more regions than grid cells")
        if self.regions_per_image > len(self.concepts):
            raise SpecError("more regions per image than concepts")


def _split_rectangles(rng, h, w, count):
    """Tile an h x w grid into ``count`` axis-aligned rectangles."""
    rects = [(0, 0, h, w)]  # (r0, c0, r1, c1), half-open
    while len(rects) < count:
        # split the largest splittable rectangle
        order = sorted(
            range(len(rects)),
            key=lambda i: (rects[i][2] - rects[i][0]) * (rects[i][3] - rects[i][1]),
            reverse=True,
        )
        for i in order:
            r0, c0, r1, c1 = rects[i]
            hh, ww = r1 - r0, c1 - c0
            if max(hh, ww) < 2:
                continue
            if hh >= ww:
                cut = r0 + int(rng.integers(1, hh))
                a, b = (r0, c0, cut, c1), (cut, c0, r1, c1)
            else:
                cut = c0 + int(rng.integers(1, ww))
                a, b = (r0, c0, r1, cut), (r0, cut, r1, c1)
            rects[i] = a
            rects.append(b)
            break
        else:
            raise SpecError("grid too small to tile into the requested regions")
    return rects


def concept_means(names, d_v, seed, mean_mix=0.0):
    """Fixed unit mean per concept, deterministic from the seed.

    mean_mix=0 gives mutually orthonormal means (maximally separable
    classes). Larger values blend toward independent random unit vectors,
    introducing pairwise correlations that make the classes harder to tell
    apart and the task more data-hungry.
    """
    if not 0.0 <= mean_mix <= 1.0:
        raise SpecError(f"mean_mix must be in [0, 1], got {mean_mix}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    raw = rng.normal(size=(d_v, len(names)))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))  # sign-fix for determinism
    means = {name: q[:, i].copy() for i, name in enumerate(names)}
    if mean_mix > 0:
        rand = rng.normal(size=(len(names), d_v))
        rand /= np.linalg.norm(rand, axis=1, keepdims=True)
        for i, name in enumerate(names):
            v = (1 - mean_mix) * means[name] + mean_mix * rand[i]
            means[name] = v / np.linalg.norm(v)
    return means


def caption_for(names, template):
    phrase = " and a ".join(names)
    return template.format(phrase)


def generate_synthetic_world(spec, out_dir=None):
    """Deterministic toy corpus: features, captions, masks, class set, means.

    Returns (FeatureStore, caption records, masks dict, means dict). When
    ``out_dir`` is given, also writes features.dvf, captions.jsonl,
    masks/<id>.pgm, classes.json and means.json.
    """
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    names_sorted = sorted(spec.concepts)
    class_index = {n: i for i, n in enumerate(names_sorted)}
    means = concept_means(names_sorted, spec.d_v, spec.seed, spec.mean_mix)

    h_p, w_p = spec.grid
    store = FeatureStore(spec.d_v)
    captions = []
    masks = {}
    for img in range(spec.image_count):
        image_id = f"img{img:05d}"
        rects = _split_rectangles(rng, h_p, w_p, spec.regions_per_image)
        chosen = [
            spec.concepts[j]
            for j in rng.choice(len(spec.concepts), size=spec.regions_per_image,
                                replace=False)
        ]
        label_grid = np.zeros((h_p, w_p), dtype=np.uint8)
        patches = np.zeros((h_p, w_p, spec.d_v))
        for rect, name in zip(rects, chosen):
            r0, c0, r1, c1 = rect
            label_grid[r0:r1, c0:c1] = class_index[name]
            patches[r0:r1, c0:c1] = means[name]
        if spec.sigma > 0:
            patches = patches + spec.sigma * rng.normal(size=patches.shape)
        patches = patches.reshape(h_p * w_p, spec.d_v)
        store.add(FeatureRecord(image_id, h_p, w_p, patches.mean(axis=0), patches))

        template = spec.templates[int(rng.integers(len(spec.templates)))]
        captions.append(
            CaptionRecord(
                image_id=image_id,
                caption=caption_for(chosen, template),
                prompt="",
                source="synthetic-world",
            )
        )
        masks[image_id] = np.kron(
            label_grid, np.ones((spec.mask_scale, spec.mask_scale), dtype=np.uint8)
        )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_feature_store(store, out / "features.dvf")
        write_captions(captions, out / "captions.jsonl")
        (out / "masks").mkdir(exist_ok=True)
        for image_id, mask in masks.items():
            write_mask(mask, out / "masks" / f"{image_id}.pgm")
        ClassSet(classes=names_sorted, templates=list(DEFAULT_TEMPLATES)).save(
            out / "classes.json"
        )
        (out / "means.json").write_text(
            json.dumps({n: list(map(float, v)) for n, v in means.items()}, indent=1)
            + "\n",
            "utf-8",
        )
    return store, captions, masks, means


# --------------------------------------------------------------------------
# caption degradation


def _rebuild(words):
    out = []
    for w in words:
        if out and not any(c.isalnum() for c in w):
            out[-1] += w
        else:
            out.append(w)
    return " ".join(out)


def _cleanup_connectors(words):
    """Drop conjunctions/prepositions left dangling after span deletion."""
    def is_punct(w):
        return not any(c.isalnum() for c in w)

    changed = True
    while changed:
        changed = False
        # conjunctions first so "of and" resolves to "of", not "and"
        for i, w in enumerate(words):
            if w not in CONJUNCTIONS:
                continue
            prv = words[i - 1] if i > 0 else None
            nxt = words[i + 1] if i + 1 < len(words) else None
            if (
                prv is None or prv in CONJUNCTIONS or prv in PREPOSITIONS
                or nxt is None or is_punct(nxt) or nxt in CONJUNCTIONS
            ):
                del words[i]
                changed = True
                break
        if changed:
            continue
        for i, w in enumerate(words):
            if w not in PREPOSITIONS:
                continue
            nxt = words[i + 1] if i + 1 < len(words) else None
            if nxt is None or is_punct(nxt) or nxt in PREPOSITIONS:
                del words[i]
                changed = True
                break
    return words


def degrade_captions(records, drop_prob, seed=0):
    """Delete each concept mention independently with probability drop_prob.

    Captions left with no concepts become "a photo.". Record order and
    image_id mapping are preserved.
    """
    if not 0.0 <= drop_prob <= 1.0:
        raise SpecError(f"drop_prob must be in [0, 1], got {drop_prob}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    out = []
    for r in records:
        nps = extract_concepts(r.caption)
        dropped = [np_ for np_ in nps if rng.random() < drop_prob]
        if not nps or not dropped:
            out.append(CaptionRecord(r.image_id, r.caption, r.prompt, r.source))
            continue
        if len(dropped) == len(nps):
            caption = "a photo."
        else:
            text = r.caption
            for np_ in sorted(dropped, key=lambda n: -n.char_span[0]):
                s, e = np_.char_span
                text = text[:s] + text[e:]
            words = [w for w, _ in split_words(text)]
            caption = _rebuild(_cleanup_connectors(words))
        out.append(CaptionRecord(r.image_id, caption, r.prompt, r.source))
    return out
