"""Frozen image encoders.

``clip-vit-b32`` wraps the pretrained vision-language tower through
``transformers`` (weights must already be on disk; nothing is downloaded at
extraction time).  ``mock-512`` is a deterministic seeded projection of
downsampled pixels with the same 512-wide interface, used for format and
parity testing where no pretrained weights are available.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

RESIZE = (224, 224)
RESAMPLE = Image.BILINEAR

# Published preprocessing constants of the vision-language encoder family.
CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073]
CLIP_STD = [0.26862954, 0.26130258, 0.27577711]


class EncoderError(Exception):
    """Unknown or unusable encoder."""


class MockEncoder:
    """Seeded random projection of 32x32 RGB thumbnails to 512 dims.

    Deterministic across runs and platforms; carries no trainable state.
    """

    name = "mock-512"
    dim = 512
    normalization = {"mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]}

    def __init__(self):
        rng = np.random.default_rng(20240)
        k = 32 * 32 * 3
        self._projection = rng.normal(0.0, 1.0 / np.sqrt(k), (k, 512)).astype(np.float32)

    def encode_batch(self, frames: list[Image.Image]) -> np.ndarray:
        out = np.empty((len(frames), 512), dtype=np.float32)
        for i, frame in enumerate(frames):
            thumb = frame.resize((32, 32), RESAMPLE)
            x = np.asarray(thumb, dtype=np.float32).reshape(-1) / 255.0
            out[i] = x @ self._projection
        return out

    def state_digest(self) -> bytes:
        return self._projection.tobytes()


class ClipVitB32Encoder:
    """Frozen ViT-B/32 image tower with the projection head (512-dim)."""

    name = "clip-vit-b32"
    dim = 512
    normalization = {"mean": CLIP_MEAN, "std": CLIP_STD}

    def __init__(self, model_id: str = "openai/clip-vit-base-patch32"):
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        except ImportError as exc:
            raise EncoderError(
                f"encoder '{self.name}' needs torch + transformers: {exc}") from None
        try:
            self._processor = CLIPImageProcessor.from_pretrained(model_id)
            self._model = CLIPVisionModelWithProjection.from_pretrained(model_id)
        except OSError as exc:
            raise EncoderError(
                f"weights for '{model_id}' not available locally: {exc}") from None
        self._torch = torch
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self._model.parameters())

    def encode_batch(self, frames: list[Image.Image]) -> np.ndarray:
        with self._torch.no_grad():
            inputs = self._processor(images=frames, return_tensors="pt")
            embeds = self._model(**inputs).image_embeds
        return embeds.cpu().numpy().astype(np.float32)


_REGISTRY = {
    MockEncoder.name: MockEncoder,
    ClipVitB32Encoder.name: ClipVitB32Encoder,
}


def make_encoder(name: str):
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise EncoderError(
            f"unknown encoder '{name}' (available: {', '.join(sorted(_REGISTRY))})"
        ) from None
    return cls()
