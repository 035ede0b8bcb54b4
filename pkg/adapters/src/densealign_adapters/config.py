"""Adapter configuration and errors."""

from __future__ import annotations

from dataclasses import dataclass, field


class AdapterError(Exception):
    """Invalid configuration or unusable inputs (maps to CLI exit 2)."""


DEFAULT_PROMPT = "Very briefly describe the image."


@dataclass
class AdapterConfig:
    """Settings shared by feature export and caption generation.

    ``prompt`` is recorded verbatim into every caption record so ablation
    sweeps over prompts can be reconstructed from the output files alone.
    """

    image_dir: str
    features_out: str = ""
    captions_out: str = ""
    backbone: str = "stub"
    vlm: str = "stub"
    prompt: str = DEFAULT_PROMPT
    device: str = "cpu"
    batch_size: int = 8
    cache_dir: str = ""
    max_tokens: int = 64
    temperature: float = 0.0
    seed: int = 0
    extensions: tuple = field(
        default=(".jpg", ".jpeg", ".png", ".ppm", ".pgm", ".bmp", ".npy", ".bin")
    )

    def __post_init__(self):
        if not self.image_dir:
            raise AdapterError("image_dir is required")
        if self.batch_size < 1:
            raise AdapterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_tokens < 1:
            raise AdapterError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise AdapterError(f"temperature must be >= 0, got {self.temperature}")
