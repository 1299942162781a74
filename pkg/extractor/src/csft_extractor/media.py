"""Frame access for videos and image directories.

Videos are decoded sequentially (two passes: count, then grab) so the index
formula sees the true number of decodable frames regardless of container
metadata.  Image directories are treated as pre-extracted frame sequences in
sorted filename order.
"""

from __future__ import annotations

from pathlib import Path

from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
VIDEO_EXTENSIONS = {".mp4", ".avi", ".mkv", ".mov", ".webm", ".mpg", ".mpeg"}


class MediaError(Exception):
    """Unreadable or empty media input."""


def _image_paths(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS)


def count_frames(source) -> int:
    source = Path(source)
    if source.is_dir():
        return len(_image_paths(source))
    if source.suffix.lower() in VIDEO_EXTENSIONS:
        return _count_video_frames(source)
    raise MediaError(f"unsupported media input: {source}")


def load_frames(source, indices: list[int]) -> list[Image.Image]:
    """Frames at the given positions, as RGB images."""
    source = Path(source)
    if source.is_dir():
        paths = _image_paths(source)
        frames = []
        for i in indices:
            try:
                with Image.open(paths[i]) as img:
                    frames.append(img.convert("RGB"))
            except OSError as exc:
                raise MediaError(f"cannot decode image {paths[i]}: {exc}") from None
        return frames
    if source.suffix.lower() in VIDEO_EXTENSIONS:
        return _load_video_frames(source, indices)
    raise MediaError(f"unsupported media input: {source}")


def _open_video(path: Path):
    try:
        import cv2
    except ImportError:
        raise MediaError(
            "video inputs need opencv-python-headless (install the 'video' extra)"
        ) from None
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise MediaError(f"cannot decode video {path}")
    return cap


def _count_video_frames(path: Path) -> int:
    cap = _open_video(path)
    count = 0
    while True:
        ok = cap.grab()
        if not ok:
            break
        count += 1
    cap.release()
    return count


def _load_video_frames(path: Path, indices: list[int]) -> list[Image.Image]:
    wanted = set(indices)
    cap = _open_video(path)
    by_pos: dict[int, Image.Image] = {}
    pos = 0
    while wanted and pos <= max(wanted):
        ok = cap.grab()
        if not ok:
            break
        if pos in wanted:
            ok, frame = cap.retrieve()
            if not ok:
                break
            by_pos[pos] = Image.fromarray(frame[:, :, ::-1])  # BGR -> RGB
            wanted.discard(pos)
        pos += 1
    cap.release()
    if wanted:
        raise MediaError(f"video {path} ended before frame {min(wanted)}")
    return [by_pos[i] for i in indices]
