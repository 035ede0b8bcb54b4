"""Frozen backbone and caption-model wrappers.

Deterministic stubs are the default: they derive features and captions from
a hash of the image bytes, so adapter outputs are reproducible and tests
need no downloaded weights. Real pretrained models can be plugged in via
`load_backbone("hf:<model-id>")` / `load_vlm("hf:<model-id>")` when torch
and transformers (and the weights) are available; both loaders fail with a
clear error otherwise.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .config import AdapterError

_STUB_NOUNS = [
    "cow", "tree", "grass", "cat", "dog", "car", "sky", "road",
    "house", "bird", "boat", "horse", "chair", "table", "flower", "rock",
]


def _rng_from_bytes(data, extra=""):
    digest = hashlib.sha256(data + extra.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class StubBackbone:
    """Deterministic stand-in for a frozen self-supervised vision backbone.

    Produces unit-variance Gaussian patch features whose values are a pure
    function of the image bytes, with the CLS vector as the patch mean.
    """

    def __init__(self, d_v=16, grid=(4, 4)):
        if d_v < 1 or grid[0] < 1 or grid[1] < 1:
            raise AdapterError(f"invalid stub backbone shape d_v={d_v} grid={grid}")
        self.d_v = int(d_v)
        self.grid = (int(grid[0]), int(grid[1]))

    def extract(self, image_bytes):
        """Return (h_p, w_p, cls, patches) for one image."""
        h_p, w_p = self.grid
        rng = _rng_from_bytes(image_bytes, "backbone")
        patches = rng.standard_normal((h_p * w_p, self.d_v))
        return h_p, w_p, patches.mean(axis=0), patches


class StubVLM:
    """Deterministic stand-in for a generative captioning model.

    Captions name two hash-selected nouns. `calls` counts actual
    generations so tests can prove the caption cache short-circuits them.
    """

    def __init__(self, max_tokens=64, temperature=0.0, seed=0):
        self.max_tokens = int(max_tokens)
        self.temperature = float(temperature)
        self.seed = int(seed)
        self.calls = 0

    def generate(self, image_bytes, prompt):
        self.calls += 1
        rng = _rng_from_bytes(image_bytes, f"vlm:{prompt}:{self.seed}")
        a, b = rng.choice(len(_STUB_NOUNS), size=2, replace=False)
        caption = f"a photo of a {_STUB_NOUNS[a]} and a {_STUB_NOUNS[b]}."
        words = caption.split()
        return " ".join(words[: self.max_tokens])


def _parse_stub_spec(spec):
    """Parse options like "stub:d_v=8,grid=2x3" into a kwargs dict."""
    kwargs = {}
    _, _, opts = spec.partition(":")
    for item in filter(None, opts.split(",")):
        key, _, value = item.partition("=")
        if key == "d_v":
            kwargs["d_v"] = int(value)
        elif key == "grid":
            h, _, w = value.partition("x")
            kwargs["grid"] = (int(h), int(w))
        else:
            raise AdapterError(f"unknown stub option {key!r} in {spec!r}")
    return kwargs


def load_backbone(name, device="cpu"):
    if name == "stub" or name.startswith("stub:"):
        return StubBackbone(**_parse_stub_spec(name))
    if name.startswith("hf:"):
        return _load_hf_backbone(name[3:], device)
    raise AdapterError(
        f"unknown backbone {name!r}; use 'stub', 'stub:d_v=16,grid=4x4', or 'hf:<model-id>'"
    )


def load_vlm(name, max_tokens=64, temperature=0.0, seed=0, device="cpu"):
    if name == "stub" or name.startswith("stub:"):
        return StubVLM(max_tokens=max_tokens, temperature=temperature, seed=seed)
    if name.startswith("hf:"):
        return _load_hf_vlm(name[3:], max_tokens, temperature, device)
    raise AdapterError(f"unknown VLM {name!r}; use 'stub' or 'hf:<model-id>'")


def _load_hf_backbone(model_id, device):
    try:
        import torch
        from transformers import AutoImageProcessor, AutoModel
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise AdapterError(f"hf backbone requires torch+transformers: {exc}") from exc

    try:
        processor = AutoImageProcessor.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id).to(device).eval()
    except Exception as exc:  # pragma: no cover - requires downloaded weights
        raise AdapterError(f"cannot load backbone {model_id!r}: {exc}") from exc

    class HFBackbone:  # pragma: no cover - requires downloaded weights
        d_v = model.config.hidden_size

        def extract(self, image_bytes):
            import io

            from PIL import Image

            image = Image.open(io.BytesIO(image_bytes)).convert("RGB")
            inputs = processor(images=image, return_tensors="pt").to(device)
            with torch.no_grad():
                out = model(**inputs).last_hidden_state[0].cpu().numpy()
            cls, patches = out[0], out[1:]
            side = int(round(len(patches) ** 0.5))
            if side * side != len(patches):
                raise AdapterError(
                    f"backbone {model_id!r} emitted {len(patches)} patch"
                    " tokens, not a square grid"
                )
            return side, side, cls, patches

    return HFBackbone()


def _load_hf_vlm(model_id, max_tokens, temperature, device):  # pragma: no cover
    try:
        import torch
        from transformers import AutoProcessor, AutoModelForVision2Seq
    except ImportError as exc:
        raise AdapterError(f"hf VLM requires torch+transformers: {exc}") from exc

    try:
        processor = AutoProcessor.from_pretrained(model_id)
        model = AutoModelForVision2Seq.from_pretrained(model_id).to(device).eval()
    except Exception as exc:
        raise AdapterError(f"cannot load VLM {model_id!r}: {exc}") from exc

    class HFVLM:
        calls = 0

        def generate(self, image_bytes, prompt):
            import io

            from PIL import Image

            self.calls += 1
            image = Image.open(io.BytesIO(image_bytes)).convert("RGB")
            inputs = processor(images=image, text=prompt, return_tensors="pt").to(device)
            with torch.no_grad():
                ids = model.generate(
                    **inputs,
                    max_new_tokens=max_tokens,
                    do_sample=temperature > 0,
                    temperature=temperature or None,
                )
            return processor.batch_decode(ids, skip_special_tokens=True)[0].strip()

    return HFVLM()
