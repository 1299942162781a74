"""Training loop: dual-rate Adam over parameter groups, gradient
accumulation, stepped learning-rate decay, checkpointing, and early stopping
on validation ROUGE-2.

Checkpoints (extension ``.ckpt``) are little-endian binaries:

    magic "CSCK" | u32 version=1
    | u32 len + config JSON (model/train configs, train state, vocab)
    | tensor table: u32 count, then per tensor
        u32 name_len | name utf8 | u8 dtype (0=f32, 1=f64) | u32 rank
        | u32 dims... | raw payload
    | optimizer moments in the same tensor-table encoding ("m."/"v." names)
    | u32 len + JSON blob with the Adam step counter and the RNG state

Training history goes to a JSONL log, one epoch per line.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import decoding, metrics, tokenizer
from .data import DataError, FrameFeatureSequence, read_feature_file, resample_frames
from .model import ModelConfig, ParameterStore, SummarizationModel, validate_params
from .numerics import AdamState, GradientTape, NumericError, adam_step
from .tokenizer import Vocab

CKPT_MAGIC = b"CSCK"
CKPT_VERSION = 1
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: "<f4", 1: "<f8"}


class CheckpointError(DataError):
    """Malformed checkpoint or checkpoint/config mismatch."""


@dataclass
class TrainConfig:
    epochs: int = 100
    micro_batch: int = 16
    accumulation: int = 4
    lr_backbone: float = 3e-5
    lr_adapter: float = 1.5e-4
    decay_factor: float = 0.95
    decay_every_epochs: int = 10
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    val_beam: int = 5
    val_max_len: int = 128
    val_block_n: int = 3

    def validate(self) -> None:
        if self.accumulation < 1:
            raise ValueError("accumulation must be >= 1")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.micro_batch < 1 or self.epochs < 1:
            raise ValueError("micro_batch and epochs must be >= 1")
        if self.lr_backbone <= 0 or self.lr_adapter <= 0:
            raise ValueError("learning rates must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainState:
    epoch: int = -1
    global_step: int = 0
    lr_backbone: float = 0.0
    lr_adapter: float = 0.0
    best_val_rouge2: float = -1.0
    best_epoch: int = -1
    epochs_since_improvement: int = 0


@dataclass
class TrainResult:
    best_checkpoint: str | None
    history: list[dict]
    state: TrainState


def lr_at_epoch(base_lr: float, epoch: int, decay_factor: float = 0.95,
                every: int = 10) -> float:
    """Multiplicative decay per completed block of ``every`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * decay_factor ** (epoch // every)


def epoch_batches(n_examples: int, micro_batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled pass: index arrays of at most ``micro_batch`` covering
    every example exactly once."""
    perm = rng.permutation(n_examples)
    return [perm[i:i + micro_batch] for i in range(0, n_examples, micro_batch)]


# ---------------------------------------------------------------------------
# Example preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedExample:
    record_id: str
    src_ids: list[int]
    feats: FrameFeatureSequence | None
    tgt_ids: list[int]
    ref_summary: str

    @property
    def n_target_tokens(self) -> int:
        return len(self.tgt_ids) - 1


def _noise_features(record_id: str, seed: int, shape: tuple[int, int]) -> FrameFeatureSequence:
    digest = hashlib.sha256(f"{seed}|{record_id}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return FrameFeatureSequence(rng.standard_normal(shape).astype(np.float32))


def prepare_examples(records, vocab: Vocab, config: ModelConfig, *,
                     random_visual: bool = False, seed: int = 0,
                     require_summary: bool = True) -> list[PreparedExample]:
    """Tokenize and load features for a list of dataset records.

    Feature files are resampled to the configured frame count with the same
    uniform index formula used at extraction time, so a frame-count ablation
    needs no re-extraction.  ``random_visual`` swaps every feature matrix
    for record-seeded Gaussian noise of the configured shape.
    """
    out = []
    for rec in records:
        if require_summary and not rec.summary:
            raise DataError(f"record '{rec.id}' has no summary")
        src_ids = tokenizer.encode(rec.step_text(), vocab, config.max_src_len)
        tgt_ids = tokenizer.encode(rec.summary, vocab, config.max_tgt_len)
        feats = None
        if not config.text_only:
            if random_visual:
                feats = _noise_features(rec.id, seed, (config.n_frames, config.d_visual))
            else:
                feats = resample_frames(read_feature_file(rec.features_path), config.n_frames)
                if feats.dim != config.d_visual:
                    raise DataError(
                        f"record '{rec.id}': feature dim {feats.dim} != configured "
                        f"d_visual {config.d_visual}")
        out.append(PreparedExample(rec.id, src_ids, feats, tgt_ids, rec.summary))
    return out


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def _write_blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _write_tensor_table(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        code = _DTYPE_TO_CODE[np.dtype(arr.dtype)]
        nb = name.encode("utf-8")
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<BI", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint {self.path}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def _read_tensor_table(r: _Reader) -> dict[str, np.ndarray]:
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        code = r.u8()
        if code not in _CODE_TO_DTYPE:
            raise CheckpointError(f"unknown dtype code {code} in {r.path}")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        itemsize = 4 if code == 0 else 8
        arr = np.frombuffer(r.take(n * itemsize), dtype=_CODE_TO_DTYPE[code])
        tensors[name] = arr.reshape(shape).copy()
    return tensors


def save_checkpoint(path, params: ParameterStore, model_config: ModelConfig,
                    train_config: TrainConfig | None = None,
                    train_state: TrainState | None = None,
                    adam_state: AdamState | None = None,
                    rng_state: dict | None = None,
                    vocab: Vocab | None = None) -> None:
    configs = {
        "model": model_config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "train_state": asdict(train_state) if train_state else None,
        "vocab": vocab.id_to_token if vocab else None,
    }
    moments = {}
    if adam_state is not None:
        moments.update({f"m.{k}": v for k, v in adam_state.m.items()})
        moments.update({f"v.{k}": v for k, v in adam_state.v.items()})
    trailer = {
        "adam_step": adam_state.step if adam_state else 0,
        "rng_state": rng_state,
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        _write_blob(fh, json.dumps(configs, sort_keys=True).encode("utf-8"))
        _write_tensor_table(fh, {name: t.data for name, t in params.items()})
        _write_tensor_table(fh, moments)
        _write_blob(fh, json.dumps(trailer, sort_keys=True).encode("utf-8"))


@dataclass
class LoadedCheckpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    train_state: TrainState | None
    params: ParameterStore
    adam_state: AdamState | None
    rng_state: dict | None
    vocab: Vocab | None


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> LoadedCheckpoint:
    """Read a checkpoint back, optionally validating its tensors against an
    externally supplied config (shape errors name the offending tensor)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic in {path}: {blob[:4]!r}")
    r = _Reader(blob, path)
    r.off = 4
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} in {path} (expected {CKPT_VERSION})")
    configs = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors = _read_tensor_table(r)
    moments = _read_tensor_table(r)
    trailer = json.loads(r.take(r.u32()).decode("utf-8"))

    model_config = ModelConfig.from_dict(configs["model"])
    train_config = TrainConfig.from_dict(configs["train"]) if configs.get("train") else None
    train_state = TrainState(**configs["train_state"]) if configs.get("train_state") else None
    vocab = Vocab(configs["vocab"]) if configs.get("vocab") else None

    params = ParameterStore()
    for name, arr in tensors.items():
        params.add(name, arr, dtype=arr.dtype)
    validate_params(params, expect_config or model_config)

    adam_state = None
    if moments:
        m = {k[2:]: v for k, v in moments.items() if k.startswith("m.")}
        v = {k[2:]: v for k, v in moments.items() if k.startswith("v.")}
        adam_state = AdamState.restore(m, v, int(trailer.get("adam_step", 0)))
        for name, t in params.items():
            if name not in adam_state.m or adam_state.m[name].shape != t.shape:
                raise CheckpointError(f"optimizer moment missing or misshaped for '{name}'")

    return LoadedCheckpoint(model_config, train_config, train_state, params,
                            adam_state, trailer.get("rng_state"), vocab)


# ---------------------------------------------------------------------------
# Validation scoring
# ---------------------------------------------------------------------------

def decode_example(model: SummarizationModel, ex: PreparedExample, vocab: Vocab,
                   beam: int, max_len: int, block_n: int) -> str:
    ids = decoding.beam_search(model, ex.src_ids, ex.feats, beam=beam,
                               max_len=max_len, block_n=block_n)
    return tokenizer.decode(ids, vocab)


def validation_rouge2(model: SummarizationModel, examples, vocab: Vocab,
                      beam: int, max_len: int, block_n: int,
                      threads: int = 1) -> float:
    """Mean per-example ROUGE-2 F1 of beam-decoded summaries."""
    def score_one(ex: PreparedExample) -> float:
        cand = decode_example(model, ex, vocab, beam, max_len, block_n)
        return metrics.rouge_n(tokenizer.tokenize(cand),
                               tokenizer.tokenize(ex.ref_summary), 2)[2]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(score_one, examples))
    else:
        scores = [score_one(ex) for ex in examples]
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

def train(model: SummarizationModel, vocab: Vocab, train_records, val_records,
          cfg: TrainConfig, *, random_visual: bool = False,
          history_path=None, resume_from=None, threads: int = 1,
          val_fn=None) -> TrainResult:
    """Run the full loop and return the best checkpoint path and history.

    Each epoch shuffles with the trainer RNG, averages gradients over groups
    of ``accumulation`` micro-batches, applies one Adam step per group with
    per-parameter-group learning rates, then beam-decodes the validation
    split and scores ROUGE-2.  Checkpoints: ``best.ckpt`` on improvement,
    ``last.ckpt`` every epoch (resume point).
    """
    cfg.validate()
    if not train_records or not val_records:
        raise ValueError("train and validation splits must both be nonempty")

    config = model.config
    train_ex = prepare_examples(train_records, vocab, config,
                                random_visual=random_visual, seed=cfg.seed)
    val_ex = prepare_examples(val_records, vocab, config,
                              random_visual=random_visual, seed=cfg.seed)

    named = dict(model.params.items())
    lr_group = {name: model.params.group_of(name) for name in named}
    adam = AdamState(named)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    start_epoch = 0

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_path = ckpt_dir / "best.ckpt"
    last_path = ckpt_dir / "last.ckpt"

    if resume_from is not None:
        loaded = load_checkpoint(resume_from, expect_config=config)
        for name, t in model.params.items():
            t.data[...] = loaded.params[name].data
        if loaded.adam_state is None or loaded.train_state is None:
            raise CheckpointError(f"{resume_from} lacks optimizer/train state; cannot resume")
        adam = loaded.adam_state
        state = loaded.train_state
        if loaded.rng_state is not None:
            rng.bit_generator.state = loaded.rng_state
        start_epoch = state.epoch + 1

    score_fn = val_fn or validation_rouge2
    history: list[dict] = []
    history_fh = open(history_path, "a", encoding="utf-8") if history_path else None

    def snapshot(path):
        save_checkpoint(path, model.params, config, cfg, state, adam,
                        rng_state=rng.bit_generator.state, vocab=vocab)

    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr_b = lr_at_epoch(cfg.lr_backbone, epoch, cfg.decay_factor, cfg.decay_every_epochs)
            lr_a = lr_at_epoch(cfg.lr_adapter, epoch, cfg.decay_factor, cfg.decay_every_epochs)
            state.lr_backbone, state.lr_adapter = lr_b, lr_a
            lr_map = {name: lr_b if g == "backbone" else lr_a for name, g in lr_group.items()}

            batches = epoch_batches(len(train_ex), cfg.micro_batch, rng)
            loss_weighted = 0.0
            tokens_seen = 0
            steps_this_epoch = 0
            for g0 in range(0, len(batches), cfg.accumulation):
                group = batches[g0:g0 + cfg.accumulation]
                acc: dict[str, np.ndarray] | None = None
                try:
                    for idx in group:
                        batch = [(train_ex[j].src_ids, train_ex[j].feats, train_ex[j].tgt_ids)
                                 for j in idx]
                        with GradientTape() as tape:
                            loss = model.loss(batch)
                        grads = tape.gradients(loss, named.values())
                        by_name = {name: grads[t] for name, t in named.items()}
                        if acc is None:
                            acc = by_name
                        else:
                            for name in acc:
                                acc[name] += by_name[name]
                        n_tok = sum(train_ex[j].n_target_tokens for j in idx)
                        loss_weighted += float(loss.data) * n_tok
                        tokens_seen += n_tok
                    if len(group) > 1:
                        inv = 1.0 / len(group)
                        for name in acc:
                            acc[name] *= inv
                    adam_step(named, acc, adam, lr_map, cfg.beta1, cfg.beta2,
                              cfg.adam_eps, cfg.weight_decay)
                except NumericError as exc:
                    raise NumericError(
                        f"epoch {epoch}, optimizer step {state.global_step + 1}: {exc}"
                    ) from exc
                state.global_step += 1
                steps_this_epoch += 1

            train_loss = loss_weighted / max(tokens_seen, 1)
            val_score = score_fn(model, val_ex, vocab, cfg.val_beam,
                                 cfg.val_max_len, cfg.val_block_n, threads)
            state.epoch = epoch
            improved = val_score > state.best_val_rouge2
            if improved:
                state.best_val_rouge2 = val_score
                state.best_epoch = epoch
                state.epochs_since_improvement = 0
            else:
                state.epochs_since_improvement = epoch - state.best_epoch

            entry = {
                "epoch": epoch,
                "train_loss": round(train_loss, 6),
                "val_rouge2": round(val_score, 6),
                "lr_backbone": lr_b,
                "lr_adapter": lr_a,
                "optimizer_steps": steps_this_epoch,
                "improved": improved,
            }
            history.append(entry)
            if history_fh:
                history_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                history_fh.flush()

            if improved:
                snapshot(best_path)
            snapshot(last_path)
            if state.epochs_since_improvement >= cfg.patience:
                break
    finally:
        if history_fh:
            history_fh.close()

    best = str(best_path) if best_path.exists() else None
    return TrainResult(best, history, state)
