"""Shared fixtures: tiny model configs, random examples, the
finite-difference gradient oracle."""

import numpy as np
import pytest

from clipsum.model import ModelConfig, SummarizationModel
from clipsum.tokenizer import BOS_ID, EOS_ID


def tiny_config(**overrides) -> ModelConfig:
    """Small-but-complete config: every architectural piece present."""
    base = dict(
        d_model=32, d_visual=16, n_enc_layers=2, n_dec_layers=2, n_heads=4,
        ffn_dim_text=64, temporal_layers=2, temporal_heads=2, temporal_ffn=32,
        fusion_layer=2, fusion_heads=1, max_src_len=24, max_tgt_len=12,
        n_frames=4, vocab_size=50,
    )
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def tiny_model(seed=1, dtype=np.float32, init_scale=None, **overrides) -> SummarizationModel:
    model = SummarizationModel.initialize(tiny_config(**overrides), seed=seed, dtype=dtype)
    if init_scale is not None:
        # Widen the init so logits are peaky (useful for decoding tests).
        for name, t in model.params.items():
            if not (name.endswith(".gain") or "bias" in name or ".b" in name):
                t.data *= init_scale
    return model


def random_tokens(rng, n, vocab_size, wrap=True):
    ids = list(rng.integers(4, vocab_size, n))
    return [BOS_ID] + [int(i) for i in ids] + [EOS_ID] if wrap else [int(i) for i in ids]


def random_example(rng, config: ModelConfig, src_len=8, tgt_len=5):
    src = random_tokens(rng, src_len, config.vocab_size)
    tgt = random_tokens(rng, tgt_len, config.vocab_size)
    feats = rng.normal(0.0, 1.0, (config.n_frames, config.d_visual))
    return src, feats, tgt


def fd_gradient(f, tensor, flat_index, h=1e-5):
    """Central finite difference of scalar-valued ``f`` wrt one coordinate."""
    flat = tensor.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    fp = f()
    flat[flat_index] = orig - h
    fm = f()
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def relative_error(analytic, numeric, floor=1e-2):
    """Relative disagreement with an absolute floor.

    Below the floor the finite-difference oracle's own cancellation noise
    (~1e-10 at these loss magnitudes with h=1e-5) would dominate a pure
    ratio, so tiny coordinates are held to |a - n| <= 1e-6 * floor instead.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def synth_dataset(tmp_path, n_records, seed=0, n_frames=4, feature_dim=16, sigma=0.1):
    """Small on-disk synthetic dataset plus a vocab covering it."""
    from clipsum.data import SyntheticConfig, generate_synthetic
    from clipsum.tokenizer import build_vocab

    records = generate_synthetic(
        tmp_path, seed=seed, n_records=n_records,
        config=SyntheticConfig(n_frames=n_frames, feature_dim=feature_dim, sigma=sigma))
    corpus = [r.step_text() for r in records] + [r.summary for r in records]
    return records, build_vocab(corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
