"""Uniform frame-index selection.

Must agree index-for-index with the consumer side's formula (golden-file
test pins 20 pairs): floor(i * (total-1) / (m-1)) with first/last always
included, the middle frame for m=1, duplicates when frames run short.
"""

from __future__ import annotations


def sample_frame_indices(total_frames: int, m: int) -> list[int]:
    if total_frames < 1 or m < 1:
        raise ValueError(f"need total_frames >= 1 and m >= 1, got {total_frames}, {m}")
    if m == 1:
        return [(total_frames - 1) // 2]
    return [i * (total_frames - 1) // (m - 1) for i in range(m)]
