"""The extraction pipeline: sample, resize, encode, write."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import RESAMPLE, RESIZE, make_encoder
from .format import write_csft
from .media import MediaError, count_frames, load_frames
from .sampling import sample_frame_indices


@dataclass
class ExtractionJob:
    input_path: str
    output_path: str
    frames: int = 50
    encoder: str = "clip-vit-b32"
    expected_dim: int | None = None
    batch_size: int = 16


def extract(job: ExtractionJob) -> dict:
    """Run one job; returns the provenance record (also written as a JSON
    sidecar next to the feature file)."""
    encoder = make_encoder(job.encoder)
    if job.expected_dim is not None and encoder.dim != job.expected_dim:
        raise ValueError(
            f"encoder '{encoder.name}' is {encoder.dim}-dim, job requested "
            f"{job.expected_dim}")
    if job.frames < 1:
        raise ValueError(f"frame count must be >= 1, got {job.frames}")

    total = count_frames(job.input_path)
    if total == 0:
        raise MediaError(f"no decodable frames in {job.input_path}")
    indices = sample_frame_indices(total, job.frames)

    features = np.empty((job.frames, encoder.dim), dtype=np.float32)
    for lo in range(0, job.frames, job.batch_size):
        chunk = indices[lo:lo + job.batch_size]
        frames = [f.resize(RESIZE, RESAMPLE) for f in load_frames(job.input_path, chunk)]
        features[lo:lo + len(chunk)] = encoder.encode_batch(frames)

    out = Path(job.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csft(out, features, np.asarray(indices, dtype=np.uint32))

    provenance = {
        "input": str(job.input_path),
        "encoder": encoder.name,
        "dim": encoder.dim,
        "frames": job.frames,
        "total_frames": total,
        "source_indices": indices,
        "resize": list(RESIZE),
        "resample": "bilinear",
        "normalization": encoder.normalization,
    }
    with open(str(out) + ".json", "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=1, sort_keys=True)
    return provenance
