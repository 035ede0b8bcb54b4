"""Export adapters bridging frozen pretrained models to alignment training.

Extracts visual patch features from a frozen backbone into the binary
feature-store format and generates synthetic captions from a generative
vision-language model into the JSONL caption format. The core training
package consumes these files; it never imports this package (and vice
versa) — the file formats are the only contract.
"""

from .config import AdapterConfig, AdapterError
from .export import export_features, generate_captions
from .formats import write_caption_jsonl, write_feature_store
from .models import StubBackbone, StubVLM, load_backbone, load_vlm

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterError",
    "StubBackbone",
    "StubVLM",
    "export_features",
    "generate_captions",
    "load_backbone",
    "load_vlm",
    "write_caption_jsonl",
    "write_feature_store",
]
