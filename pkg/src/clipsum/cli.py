"""Operator surface: dataset synthesis, training, evaluation, summarization.

Config files are flat ``key = value`` lines with ``#`` comments; keys must
belong to the model/train schema (unknown keys are errors).  Command-line
flags override file values, and the effective configuration is echoed into
every output directory.  Exit codes: 0 success, 1 usage/config error,
2 data error, 3 numeric failure.  ``CLIPSUM_THREADS`` caps internal
parallelism (validation/evaluation decoding).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import decoding, metrics, tokenizer
from .data import (DataError, SyntheticConfig, generate_synthetic,
                   load_dataset, read_feature_file, resample_frames)
from .model import ModelConfig, SummarizationModel
from .numerics import NumericError, ShapeError
from .training import (CheckpointError, TrainConfig, load_checkpoint,
                       prepare_examples, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    """Bad config file contents or inconsistent option values."""


class UsageError(Exception):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); keep our code map
        raise UsageError(message)


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("CLIPSUM_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_MODEL_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str, default) -> object:
    kind = type(default)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_file(path) -> dict[str, object]:
    """Flat key = value lines; every key must be a known schema field."""
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key in _MODEL_DEFAULTS:
                values[key] = _coerce(key, raw, _MODEL_DEFAULTS[key])
            elif key in _TRAIN_DEFAULTS:
                values[key] = _coerce(key, raw, _TRAIN_DEFAULTS[key])
            else:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
    return values


def build_configs(values: dict[str, object]) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs = {k: v for k, v in values.items() if k in _MODEL_DEFAULTS}
    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_DEFAULTS}
    try:
        model_cfg = ModelConfig(**model_kwargs)
        model_cfg.validate()
        train_cfg = TrainConfig(**train_kwargs)
        train_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return model_cfg, train_cfg


def echo_config(out_dir: Path, model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    lines = ["# effective configuration"]
    for name, value in model_cfg.to_dict().items():
        lines.append(f"{name} = {value}")
    for name, value in train_cfg.to_dict().items():
        lines.append(f"{name} = {value}")
    (out_dir / "config.effective").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate_synthetic(args) -> int:
    if args.count < 1:
        raise UsageError("count must be >= 1")
    cfg = SyntheticConfig(n_frames=args.frames, feature_dim=args.feature_dim,
                          sigma=args.sigma)
    records = generate_synthetic(args.out, args.seed, args.count, cfg)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _load_run_config(args) -> tuple[ModelConfig, TrainConfig]:
    values = parse_config_file(args.config) if args.config else {}
    if args.fusion_layer is not None:
        values["fusion_layer"] = args.fusion_layer
    if args.frames is not None:
        values["n_frames"] = args.frames
    if args.text_only:
        values["text_only"] = True
    return build_configs(values)


def cmd_train(args) -> int:
    if args.text_only and args.random_visual:
        raise UsageError("--text-only and --random-visual are mutually exclusive")
    model_cfg, train_cfg = _load_run_config(args)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg.checkpoint_dir = str(out_dir)

    train_records = load_dataset(args.train, require_summary=True)
    val_records = load_dataset(args.val, require_summary=True)
    if not train_records or not val_records:
        raise DataError("train/val splits must be nonempty")

    corpus = [rec.step_text() for rec in train_records]
    corpus += [rec.summary for rec in train_records]
    try:
        vocab = tokenizer.build_vocab(corpus, max_size=model_cfg.vocab_size)
        model_cfg.vocab_size = len(vocab)
        model_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tokenizer.save_vocab(out_dir / "vocab.txt", vocab)
    echo_config(out_dir, model_cfg, train_cfg)

    model = SummarizationModel.initialize(model_cfg, seed=train_cfg.seed)
    result = train(model, vocab, train_records, val_records, train_cfg,
                   random_visual=args.random_visual,
                   history_path=out_dir / "history.jsonl",
                   threads=thread_cap())
    best = result.best_checkpoint or "(no checkpoint: no epoch improved)"
    print(f"best checkpoint: {best}")
    print(f"best val ROUGE-2: {100.0 * result.state.best_val_rouge2:.1f} "
          f"(epoch {result.state.best_epoch})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    expect = None
    if args.config:
        expect, _ = build_configs(parse_config_file(args.config))
    ckpt = load_checkpoint(args.checkpoint, expect_config=expect)
    config = expect or ckpt.model_config
    if ckpt.vocab is None:
        raise CheckpointError(f"{args.checkpoint} carries no vocabulary")
    records = load_dataset(args.data, require_summary=True)
    if not records:
        raise DataError(f"dataset {args.data} is empty")

    model = SummarizationModel(config, ckpt.params)
    examples = prepare_examples(records, ckpt.vocab, config)

    def decode_one(ex):
        ids = decoding.beam_search(model, ex.src_ids, ex.feats,
                                   beam=args.beam, max_len=args.max_len,
                                   block_n=args.block_n)
        return tokenizer.decode(ids, ckpt.vocab)

    workers = thread_cap()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hyps = list(pool.map(decode_one, examples))
    else:
        hyps = [decode_one(ex) for ex in examples]
    refs = [ex.ref_summary for ex in examples]

    report = metrics.evaluate_corpus(hyps, refs)
    table = report.format_table()
    print(table)

    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    with open(out_dir / "hypotheses.jsonl", "w", encoding="utf-8") as fh:
        for ex, hyp in zip(examples, hyps):
            fh.write(json.dumps({"id": ex.record_id, "candidate": hyp,
                                 "reference": ex.ref_summary}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_summarize(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.model_config
    if ckpt.vocab is None:
        raise CheckpointError(f"{args.checkpoint} carries no vocabulary")
    feats = None
    if config.text_only:
        if args.features:
            print("warning: checkpoint is text-only; ignoring --features", file=sys.stderr)
    else:
        if not args.features:
            raise UsageError("checkpoint is multimodal: --features is required")
        feats = read_feature_file(args.features)
        if feats.dim != config.d_visual:
            raise DataError(
                f"feature file dim {feats.dim} != model d_visual {config.d_visual}")
        feats = resample_frames(feats, config.n_frames)

    model = SummarizationModel(config, ckpt.params)
    src_ids = tokenizer.encode(args.steps, ckpt.vocab, config.max_src_len)
    ids = decoding.beam_search(model, src_ids, feats, beam=args.beam,
                               max_len=args.max_len, block_n=args.block_n)
    print(tokenizer.decode(ids, ckpt.vocab))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def make_parser() -> _Parser:
    parser = _Parser(prog="clipsum", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synthetic", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--feature-dim", type=int, default=512)
    p.set_defaults(fn=cmd_generate_synthetic)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion-layer", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--text-only", action="store_true")
    p.add_argument("--random-visual", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="decode a dataset and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--block-n", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("summarize", help="summarize one example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", required=True)
    p.add_argument("--features")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument("--block-n", type=int, default=3)
    p.set_defaults(fn=cmd_summarize)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
