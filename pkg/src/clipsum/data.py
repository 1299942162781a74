"""Dataset records, frame-feature file I/O, frame sampling, synthetic task.

Feature files (extension ``.csft``) are little-endian binaries:

    magic "CSFT" | u32 version=1 | u32 num_frames | u32 dim
    | u32 flags (bit 0: source-index table present)
    | [u32 x num_frames source indices, if flagged]
    | f32 x (num_frames * dim) row-major features

Datasets are JSONL, one record per line with fields id / steps /
features_path / summary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CSFT"
FORMAT_VERSION = 1
FLAG_SOURCE_INDICES = 1


class DataError(Exception):
    """Base class for dataset / feature-file problems."""


class FeatureFileError(DataError):
    """Malformed or inconsistent feature file."""


class DatasetFormatError(DataError):
    """Malformed dataset line or missing field."""


@dataclass
class FrameFeatureSequence:
    """Per-frame visual features plus the original frame positions."""

    features: np.ndarray                 # (M, dim) float32
    source_indices: np.ndarray | None = None  # (M,) original frame positions

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise FeatureFileError(
                f"features must be 2-D (frames x dim), got shape {self.features.shape}")
        if self.source_indices is not None:
            self.source_indices = np.ascontiguousarray(self.source_indices, dtype=np.uint32)
            if self.source_indices.shape != (self.features.shape[0],):
                raise FeatureFileError(
                    f"source_indices length {self.source_indices.shape} does not match "
                    f"{self.features.shape[0]} frames")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DatasetRecord:
    """One example: ordered step descriptions plus a feature file path."""

    id: str
    steps: list[str]
    features_path: str
    summary: str = ""

    def step_text(self) -> str:
        return " ".join(self.steps)


def sample_frame_indices(total_frames: int, m: int) -> list[int]:
    """Uniformly spread ``m`` indices over ``[0, total_frames)``.

    First and last frames are always included for m > 1; duplicates appear
    when there are fewer frames than samples.
    """
    if total_frames < 1 or m < 1:
        raise ValueError(f"need total_frames >= 1 and m >= 1, got {total_frames}, {m}")
    if m == 1:
        return [(total_frames - 1) // 2]
    return [i * (total_frames - 1) // (m - 1) for i in range(m)]


def resample_frames(seq: FrameFeatureSequence, n_frames: int) -> FrameFeatureSequence:
    """Pick ``n_frames`` rows with the uniform index formula (no-op when the
    count already matches), so stored features serve any frame-count config."""
    if seq.num_frames == n_frames:
        return seq
    idx = sample_frame_indices(seq.num_frames, n_frames)
    src = seq.source_indices[idx] if seq.source_indices is not None else None
    return FrameFeatureSequence(seq.features[idx], src)


# ---------------------------------------------------------------------------
# Feature file I/O
# ---------------------------------------------------------------------------

def write_feature_file(path, seq: FrameFeatureSequence) -> None:
    if not np.all(np.isfinite(seq.features)):
        raise FeatureFileError("refusing to write non-finite feature values")
    flags = FLAG_SOURCE_INDICES if seq.source_indices is not None else 0
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, seq.num_frames, seq.dim, flags))
        if seq.source_indices is not None:
            fh.write(seq.source_indices.astype("<u4").tobytes())
        fh.write(seq.features.astype("<f4").tobytes())


def read_feature_file(path) -> FrameFeatureSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FeatureFileError(f"bad magic in {path}: {blob[:4]!r}")
    if len(blob) < 20:
        raise FeatureFileError(f"truncated header in {path}")
    version, num_frames, dim, flags = struct.unpack("<IIII", blob[4:20])
    if version != FORMAT_VERSION:
        raise FeatureFileError(
            f"unsupported version {version} in {path} (expected {FORMAT_VERSION})")
    if dim <= 0:
        raise FeatureFileError(f"invalid feature dim {dim} in {path}")
    if num_frames <= 0:
        raise FeatureFileError(f"invalid frame count {num_frames} in {path}")
    offset = 20
    indices = None
    if flags & FLAG_SOURCE_INDICES:
        need = 4 * num_frames
        if len(blob) < offset + need:
            raise FeatureFileError(f"truncated source-index table in {path}")
        indices = np.frombuffer(blob, dtype="<u4", count=num_frames, offset=offset).copy()
        offset += need
    need = 4 * num_frames * dim
    if len(blob) < offset + need:
        raise FeatureFileError(
            f"truncated payload in {path}: header promises {num_frames}x{dim} floats")
    feats = np.frombuffer(blob, dtype="<f4", count=num_frames * dim, offset=offset)
    return FrameFeatureSequence(feats.reshape(num_frames, dim).copy(), indices)


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------

def load_dataset(path, require_summary: bool = False) -> list[DatasetRecord]:
    """Parse a JSONL dataset, preserving record order.

    Feature paths are resolved relative to the dataset file's directory but
    are not opened here; unreadable features surface on first use.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"dataset file not found: {path}")
    base = path.parent
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            for key in ("id", "steps", "features_path"):
                if key not in obj:
                    raise DatasetFormatError(f"{path}:{lineno}: missing field '{key}'")
            if require_summary and not obj.get("summary"):
                raise DatasetFormatError(
                    f"{path}:{lineno}: missing field 'summary' (required for training)")
            steps = obj["steps"]
            if not isinstance(steps, list) or not steps:
                raise DatasetFormatError(f"{path}:{lineno}: 'steps' must be a nonempty list")
            records.append(DatasetRecord(
                id=str(obj["id"]),
                steps=[str(s) for s in steps],
                features_path=str(base / obj["features_path"]),
                summary=str(obj.get("summary", "")),
            ))
    return records


def write_dataset(path, records: list[DatasetRecord], relative_to=None) -> None:
    relative_to = Path(relative_to) if relative_to else None
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fpath = rec.features_path
            if relative_to is not None:
                fpath = str(Path(fpath).relative_to(relative_to))
            fh.write(json.dumps({
                "id": rec.id,
                "steps": rec.steps,
                "features_path": fpath,
                "summary": rec.summary,
            }, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Synthetic procedural-recipe task
# ---------------------------------------------------------------------------
#
# Each record is a pseudo-recipe whose steps walk through three phases
# (prepare, cook, finish).  Exactly one summary-relevant attribute -- the
# "doneness" of the cook phase -- never appears in the step text; it is
# observable only in the frame features, where the cook-phase frames carry
# the attribute's codebook vector plus Gaussian noise.  A text-only system
# therefore has no channel to recover it.

PREP_ACTIONS = ["chop", "marinate", "rinse", "soak", "whisk"]
COOK_ACTIONS = ["fry", "grill", "roast", "simmer", "steam"]
FINISH_ACTIONS = ["coat", "drizzle", "garnish", "glaze", "sprinkle"]
INGREDIENTS = ["beans", "beef", "carrots", "chicken", "garlic", "mushrooms",
               "noodles", "onions", "peppers", "rice", "salmon", "tofu"]
MODIFIERS = ["evenly", "gently", "lightly", "quickly", "thoroughly"]
DONENESS = ["caramelized", "charred", "crispy", "golden", "smoky", "tender"]

CODEBOOK_SEED = 7309421  # fixed: the codebook is shared across splits/seeds


@dataclass
class SyntheticConfig:
    n_frames: int = 50
    feature_dim: int = 512
    sigma: float = 0.1
    min_steps: int = 4
    max_steps: int = 8


def make_codebook(feature_dim: int) -> dict[str, np.ndarray]:
    """Deterministic token -> feature-vector map for all visual tokens."""
    rng = np.random.default_rng(CODEBOOK_SEED)
    codebook = {}
    for token in INGREDIENTS + DONENESS:
        codebook[token] = rng.normal(0.0, 1.0, feature_dim).astype(np.float32)
    return codebook


def _phase_sizes(n_steps: int, rng: np.random.Generator) -> tuple[int, int, int]:
    n_prep = max(1, int(rng.integers(1, max(2, n_steps - 2) + 1)))
    n_finish = max(1, int(rng.integers(1, max(2, n_steps - n_prep - 1) + 1)))
    n_cook = n_steps - n_prep - n_finish
    if n_cook < 1:
        n_prep, n_cook, n_finish = 1, n_steps - 2, 1
    return n_prep, n_cook, n_finish


def generate_synthetic(out_dir, seed: int, n_records: int,
                       config: SyntheticConfig | None = None) -> list[DatasetRecord]:
    """Write a synthetic dataset, its feature files, and the codebook manifest.

    Fully reproducible from ``seed``; the codebook itself depends only on the
    feature dimension so multiple splits share one visual vocabulary.
    """
    if n_records < 1:
        raise ValueError(f"n_records must be >= 1, got {n_records}")
    cfg = config or SyntheticConfig()
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    codebook = make_codebook(cfg.feature_dim)
    rng = np.random.default_rng(seed)

    records = []
    attributes = {}
    for i in range(n_records):
        rec_id = f"syn{seed:04d}-{i:05d}"
        n_steps = int(rng.integers(cfg.min_steps, cfg.max_steps + 1))
        prep_a = str(rng.choice(PREP_ACTIONS))
        cook_a = str(rng.choice(COOK_ACTIONS))
        finish_a = str(rng.choice(FINISH_ACTIONS))
        main_ing, side_ing = (str(t) for t in rng.choice(INGREDIENTS, size=2, replace=False))
        doneness = str(rng.choice(DONENESS))
        attributes[rec_id] = doneness

        n_prep, n_cook, n_finish = _phase_sizes(n_steps, rng)
        phases = [("prep", prep_a)] * n_prep + [("cook", cook_a)] * n_cook \
            + [("finish", finish_a)] * n_finish

        steps = []
        step_visual_tokens = []
        for s, (phase, action) in enumerate(phases):
            if s == 0:
                ing = main_ing
            elif s == n_steps - 1:
                ing = side_ing
            else:
                ing = str(rng.choice(INGREDIENTS))
            modifier = str(rng.choice(MODIFIERS))
            steps.append(f"{action} the {ing} {modifier}")
            # Cook-phase frames show the doneness state; others show the food.
            step_visual_tokens.append(doneness if phase == "cook" else ing)

        summary = (f"{prep_a} the {main_ing} then {cook_a} until {doneness} "
                   f"and {finish_a} with {side_ing}")

        # Contiguous frame span per step, covering all n_frames in order.
        bounds = np.linspace(0, cfg.n_frames, n_steps + 1).astype(int)
        feats = np.empty((cfg.n_frames, cfg.feature_dim), dtype=np.float32)
        for s in range(n_steps):
            lo, hi = bounds[s], bounds[s + 1]
            base = codebook[step_visual_tokens[s]]
            noise = rng.normal(0.0, 1.0, (hi - lo, cfg.feature_dim)) * cfg.sigma
            feats[lo:hi] = base + noise.astype(np.float32)

        fpath = feat_dir / f"{rec_id}.csft"
        write_feature_file(fpath, FrameFeatureSequence(
            feats, np.arange(cfg.n_frames, dtype=np.uint32)))
        records.append(DatasetRecord(
            id=rec_id, steps=steps, features_path=str(fpath), summary=summary))

    write_dataset(out_dir / "dataset.jsonl", records, relative_to=out_dir)
    manifest = {
        "feature_dim": cfg.feature_dim,
        "n_frames": cfg.n_frames,
        "sigma": cfg.sigma,
        "attribute_tokens": DONENESS,
        "codebook": {tok: vec.tolist() for tok, vec in sorted(codebook.items())},
        "record_attributes": attributes,
    }
    with open(out_dir / "codebook.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
    return records
