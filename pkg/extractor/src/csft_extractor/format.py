"""CSFT writer, bit-exact against the consumer's reader.

Layout (little-endian): magic "CSFT" | u32 version=1 | u32 num_frames
| u32 dim | u32 flags (bit 0: source-index table) | u32 indices... | f32 data.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CSFT"
FORMAT_VERSION = 1
FLAG_SOURCE_INDICES = 1


def write_csft(path, features: np.ndarray, source_indices: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    source_indices = np.ascontiguousarray(source_indices, dtype="<u4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    if source_indices.shape != (features.shape[0],):
        raise ValueError("one source index per frame required")
    if not np.all(np.isfinite(features)):
        raise ValueError("refusing to write non-finite features")
    num_frames, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, num_frames, dim,
                             FLAG_SOURCE_INDICES))
        fh.write(source_indices.tobytes())
        fh.write(features.tobytes())
