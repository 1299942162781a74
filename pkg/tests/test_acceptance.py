"""Acceptance gate: one test per criterion, each printing PASS/FAIL.

Run with ``pytest tests/test_acceptance.py -v -s`` to watch the lines appear;
the two long criteria (overfit, ordering experiment) dominate the runtime.
"""

import functools
import math
import time

import numpy as np
import pytest

from clipsum import metrics, tokenizer
from clipsum.data import (FrameFeatureSequence, FeatureFileError, SyntheticConfig,
                          generate_synthetic, read_feature_file,
                          write_feature_file)
from clipsum.decoding import beam_search, greedy_decode
from clipsum.model import (GROUP_ADAPTER, GROUP_BACKBONE, ModelConfig,
                           SummarizationModel, forward_loss, fuse, init_params)
from clipsum.numerics import (AdamState, GradientTape, ShapeError, Tensor,
                              adam_step, log_softmax_np)
from clipsum.tokenizer import BOS_ID, EOS_ID, build_vocab, decode, encode, normalize
from clipsum.training import (CheckpointError, TrainConfig, load_checkpoint,
                              lr_at_epoch, prepare_examples, save_checkpoint,
                              train)
from conftest import fd_gradient, relative_error, tiny_config
from test_decoding import decoding_model, enumerate_argmax, has_repeated_trigram
from test_metrics import brute_force_rouge_n
from test_model import scalar_fusion_oracle


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.time()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {name}: FAIL ({time.time() - t0:.1f}s)")
                raise
            print(f"\nACCEPTANCE {name}: PASS ({time.time() - t0:.1f}s)")
        return wrapper
    return deco


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

@criterion("gradient-oracle")
def test_full_model_gradient_check():
    """64-bit finite differences (h=1e-5) on the stated tiny config: max
    relative error <= 1e-6 over >= 200 coordinates covering every tensor in
    both parameter groups, in under 2 minutes."""
    start = time.time()
    cfg = tiny_config()  # d_model=32, 2+2 layers, vocab 50, M=4
    assert (cfg.d_model, cfg.n_enc_layers, cfg.n_dec_layers,
            cfg.vocab_size, cfg.n_frames) == (32, 2, 2, 50, 4)
    model = SummarizationModel.initialize(cfg, seed=11, dtype=np.float64)
    rng = np.random.default_rng(0)
    src = [BOS_ID] + [int(i) for i in rng.integers(4, 50, 9)] + [EOS_ID]
    tgt = [BOS_ID] + [int(i) for i in rng.integers(4, 50, 6)] + [EOS_ID]
    feats = rng.normal(0.0, 1.0, (4, 16))
    batch = [(src, feats, tgt)]

    named = dict(model.params.items())
    with GradientTape() as tape:
        loss = model.loss(batch)
    grads = tape.gradients(loss, named.values())

    def f():
        return float(forward_loss(batch, model.params, cfg).data)

    groups_seen = set()
    checked = 0
    worst = 0.0
    coord_rng = np.random.default_rng(23)
    for name, t in named.items():
        groups_seen.add(model.params.group_of(name))
        for i in {int(coord_rng.integers(t.size)) for _ in range(3)}:
            num = fd_gradient(f, t, i, h=1e-5)
            ana = grads[t].reshape(-1)[i]
            worst = max(worst, relative_error(ana, num))
            checked += 1
    assert checked >= 200, checked
    assert groups_seen == {GROUP_BACKBONE, GROUP_ADAPTER}
    assert worst <= 1e-6, f"max relative error {worst:.3e}"
    assert time.time() - start < 120.0


# ---------------------------------------------------------------------------
# Fusion oracle
# ---------------------------------------------------------------------------

@criterion("fusion-oracle")
def test_fusion_against_scalar_oracle():
    """fuse() on N=2, M=3, d=4 vs a loop-by-loop scalar evaluation of the
    cross-modal attention equations, within 1e-6."""
    rng = np.random.default_rng(77)
    cfg = tiny_config(d_model=4, d_visual=4, n_heads=2, fusion_heads=1)
    params = init_params(cfg, seed=5, dtype=np.float64)
    for name in ("fusion.wq", "fusion.wk", "fusion.wv", "fusion.wo",
                 "fusion.ln.gain", "fusion.ln.bias"):
        params[name].data[...] = rng.normal(0.0, 0.6, params[name].shape)
    a = rng.normal(0.0, 1.0, (2, 4))
    vproj = rng.normal(0.0, 1.0, (3, 4))
    got = fuse(Tensor(a, dtype=np.float64), Tensor(vproj, dtype=np.float64),
               params, cfg).data
    want = scalar_fusion_oracle(
        a.tolist(), vproj.tolist(),
        params["fusion.wq"].data.tolist(), params["fusion.wk"].data.tolist(),
        params["fusion.wv"].data.tolist(), params["fusion.wo"].data.tolist(),
        params["fusion.ln.gain"].data.tolist(),
        params["fusion.ln.bias"].data.tolist(), eps=cfg.ln_eps)
    assert np.abs(got - want).max() <= 1e-6


# ---------------------------------------------------------------------------
# Decoding oracle
# ---------------------------------------------------------------------------

@criterion("decoding-oracle")
def test_beam_search_oracles():
    """Exhaustive-enumeration equality on vocab 6 / max_len 4 / beam |V|^L;
    beam-1 == greedy; no repeated trigram over 1,000 random-model decodes;
    under 1 minute."""
    start = time.time()
    rng = np.random.default_rng(5)

    for seed in range(3):
        model = decoding_model(seed=seed, vocab_size=6, max_tgt_len=8, init_scale=8.0)
        src = [BOS_ID] + [int(i) for i in rng.integers(4, 6, 3)] + [EOS_ID]
        feats = rng.normal(size=(2, 8)).astype(np.float32)
        want_tokens, _ = enumerate_argmax(model, src, feats, max_len=4, block_n=3)
        got = beam_search(model, src, feats, beam=6 ** 4, max_len=4, block_n=3)
        assert got == want_tokens

    for seed in range(5):
        model = decoding_model(seed=seed)
        src = [BOS_ID] + [int(i) for i in rng.integers(4, 14, 5)] + [EOS_ID]
        feats = rng.normal(size=(2, 8)).astype(np.float32)
        assert beam_search(model, src, feats, beam=1, max_len=14) == \
            greedy_decode(model, src, feats, max_len=14)

    # control: with blocking effectively off, these models do loop
    looped = 0
    for model_seed in range(6):
        model = decoding_model(seed=model_seed, init_scale=16.0)
        src = [BOS_ID] + [int(i) for i in rng.integers(4, 14, 5)] + [EOS_ID]
        feats = rng.normal(size=(2, 8)).astype(np.float32)
        looped += has_repeated_trigram(
            greedy_decode(model, src, feats, max_len=12, block_n=50))
    assert looped > 0

    decodes = 0
    for model_seed in range(40):
        model = decoding_model(seed=model_seed, init_scale=16.0)
        for _ in range(25):
            src = [BOS_ID] + [int(i) for i in rng.integers(4, 14, 5)] + [EOS_ID]
            feats = rng.normal(size=(2, 8)).astype(np.float32)
            out = beam_search(model, src, feats, beam=5, max_len=12, block_n=3)
            assert not has_repeated_trigram(out), (model_seed, out)
            assert len(out) <= 128
            decodes += 1
    assert decodes == 1000
    assert time.time() - start < 60.0


# ---------------------------------------------------------------------------
# Metric oracles
# ---------------------------------------------------------------------------

@criterion("metric-oracles")
def test_metric_oracles():
    """Identical pairs score exactly 1; the hand-derived examples reproduce
    to 6 decimals; 100 random ROUGE-1/2 cases match brute force exactly."""
    same = "whisk the eggs until fluffy".split()
    for n in (1, 2):
        assert metrics.rouge_n(same, list(same), n) == (1.0, 1.0, 1.0)
    assert metrics.rouge_l(same, list(same)) == (1.0, 1.0, 1.0)
    assert metrics.bleu4([same], [list(same)]) == 1.0

    # hand-derived values, to 6 decimals
    assert round(metrics.rouge_n("a b c".split(), "a c d".split(), 1)[2], 6) == round(2 / 3, 6)
    assert round(metrics.rouge_l("a b c d".split(), "b d".split())[2], 6) == round(2 / 3, 6)
    toy_c = ["the cat sat on the mat".split(), "he ate the pie".split()]
    toy_r = ["the cat sat on a mat".split(), "he ate a pie quickly".split()]
    want_bleu = math.exp(1 - 11 / 10) * math.exp(
        (math.log(8 / 10) + math.log(4 / 8) + math.log(2 / 6) + math.log(1 / 4)) / 4)
    assert round(metrics.bleu4(toy_c, toy_r), 6) == round(want_bleu, 6)
    ident4 = "w x y z".split()
    assert round(metrics.meteor_lite(ident4, list(ident4)), 6) == round(1 - 0.5 / 64, 6)
    assert round(metrics.meteor_lite(["cooking"], ["cooked"]), 6) == 0.5

    rng = np.random.default_rng(31)
    alphabet = list("abcdefg")
    for case in range(100):
        cand = [str(x) for x in rng.choice(alphabet, size=rng.integers(0, 12))]
        ref = [str(x) for x in rng.choice(alphabet, size=rng.integers(0, 12))]
        n = 1 + case % 2
        assert metrics.rouge_n(cand, ref, n) == brute_force_rouge_n(cand, ref, n)


# ---------------------------------------------------------------------------
# Overfit check
# ---------------------------------------------------------------------------

@criterion("overfit-check")
def test_overfit_eight_records(tmp_path):
    """8 synthetic records, tiny config, <= 300 epochs: loss < 0.1
    nats/token and greedy decode reproduces all 8 references; < 10 min."""
    start = time.time()
    records = generate_synthetic(
        tmp_path, seed=42, n_records=8,
        config=SyntheticConfig(n_frames=4, feature_dim=16, sigma=0.1))
    corpus = [r.step_text() for r in records] + [r.summary for r in records]
    vocab = build_vocab(corpus)
    cfg = tiny_config(max_src_len=48, max_tgt_len=16, vocab_size=len(vocab))
    model = SummarizationModel.initialize(cfg, seed=0)
    tc = TrainConfig(epochs=300, micro_batch=4, accumulation=1,
                     lr_backbone=1.5e-3, lr_adapter=6e-3, decay_every_epochs=25,
                     patience=300, seed=0, checkpoint_dir=str(tmp_path / "ck"),
                     val_beam=2, val_max_len=16)
    result = train(model, vocab, records, records, tc,
                   val_fn=lambda *a, **k: 0.0)
    assert len(result.history) <= 300
    final_loss = result.history[-1]["train_loss"]
    assert final_loss < 0.1, f"final loss {final_loss}"

    for ex in prepare_examples(records, vocab, cfg):
        ids = greedy_decode(model, ex.src_ids, ex.feats, max_len=16)
        assert decode(ids, vocab) == normalize(ex.ref_summary)
    assert time.time() - start < 600.0


# ---------------------------------------------------------------------------
# Ordering experiment
# ---------------------------------------------------------------------------

ORDERING_SYN = SyntheticConfig(n_frames=12, feature_dim=24, sigma=0.1)


def _ordering_model_config(vocab_size, text_only):
    return ModelConfig(
        d_model=48, d_visual=24, n_enc_layers=2, n_dec_layers=2, n_heads=4,
        ffn_dim_text=96, temporal_layers=1, temporal_heads=2, temporal_ffn=48,
        fusion_layer=2, max_src_len=48, max_tgt_len=16, n_frames=12,
        vocab_size=vocab_size, text_only=text_only)


def _run_ordering_arm(workdir, vocab, train_recs, val_recs, test_recs,
                      seed, *, text_only=False, random_visual=False):
    """One train-select-evaluate pass; mirrors what the CLI flags
    --text-only / --random-visual wire up."""
    cfg = _ordering_model_config(len(vocab), text_only)
    model = SummarizationModel.initialize(cfg, seed=seed)
    # Uniform rates: a hot adapter rate destabilizes the fusion pathway at
    # this scale (see notes); the 5x dual-rate machinery is asserted
    # separately at the reference values.
    tc = TrainConfig(epochs=18, micro_batch=16, accumulation=1,
                     lr_backbone=2e-3, lr_adapter=2e-3, patience=18, seed=seed,
                     checkpoint_dir=str(workdir), val_beam=5, val_max_len=16)
    result = train(model, vocab, train_recs, val_recs, tc,
                   random_visual=random_visual)
    best = load_checkpoint(result.best_checkpoint)
    best_model = SummarizationModel(best.model_config, best.params)
    examples = prepare_examples(test_recs, vocab, cfg,
                                random_visual=random_visual, seed=seed)
    hyps = [decode(beam_search(best_model, ex.src_ids, ex.feats,
                               beam=5, max_len=16), vocab)
            for ex in examples]
    report = metrics.evaluate_corpus(hyps, [ex.ref_summary for ex in examples])
    return 100.0 * report.mean_rouge1


@criterion("ordering-experiment")
def test_ordering_experiment(tmp_path):
    """500/100/100 synthetic records at sigma=0.1: informative features beat
    the random-visual control and the text-only arm by >= 5 ROUGE-1 points
    each, median over 3 seeds; < 1 hour."""
    start = time.time()
    train_recs = generate_synthetic(tmp_path / "train", seed=101, n_records=500,
                                    config=ORDERING_SYN)
    val_recs = generate_synthetic(tmp_path / "val", seed=102, n_records=100,
                                  config=ORDERING_SYN)
    test_recs = generate_synthetic(tmp_path / "test", seed=103, n_records=100,
                                   config=ORDERING_SYN)
    corpus = [r.step_text() for r in train_recs] + [r.summary for r in train_recs]
    vocab = build_vocab(corpus)

    gaps_rand, gaps_text = [], []
    for seed in (0, 1, 2):
        full = _run_ordering_arm(tmp_path / f"full{seed}", vocab, train_recs,
                                 val_recs, test_recs, seed)
        rand = _run_ordering_arm(tmp_path / f"rand{seed}", vocab, train_recs,
                                 val_recs, test_recs, seed, random_visual=True)
        text = _run_ordering_arm(tmp_path / f"text{seed}", vocab, train_recs,
                                 val_recs, test_recs, seed, text_only=True)
        gaps_rand.append(full - rand)
        gaps_text.append(full - text)
        print(f"\n  seed {seed}: full={full:.1f} random-visual={rand:.1f} "
              f"text-only={text:.1f}")

    med_rand = float(np.median(gaps_rand))
    med_text = float(np.median(gaps_text))
    print(f"  median gap vs random-visual: {med_rand:.1f} pts; "
          f"vs text-only: {med_text:.1f} pts")
    assert med_rand >= 5.0, gaps_rand
    assert med_text >= 5.0, gaps_text
    assert time.time() - start < 3600.0


# ---------------------------------------------------------------------------
# Schedule / optimizer checks
# ---------------------------------------------------------------------------

@criterion("schedule-optimizer")
def test_schedule_and_optimizer_checks(tmp_path):
    """lr closed form over epochs 0..100; adapter moves 5x backbone at the
    reference rates under unit gradients; accumulation equivalence in 64-bit."""
    for epoch in range(101):
        want = 3e-5 * 0.95 ** (epoch // 10)
        assert lr_at_epoch(3e-5, epoch) == pytest.approx(want, rel=1e-12)

    model = SummarizationModel.initialize(tiny_config(), seed=1, dtype=np.float64)
    named = dict(model.params.items())
    lr_map = {n: 1.5e-4 if model.params.group_of(n) == GROUP_ADAPTER else 3e-5
              for n in named}
    grads = {n: np.ones_like(t.data) for n, t in named.items()}
    before = {n: t.data.copy() for n, t in named.items()}
    adam_step(named, grads, AdamState(named), lr_map, weight_decay=0.0)
    moves = {n: np.abs(t.data - before[n]).max() for n, t in named.items()}
    adapter_names = model.params.names_in_group(GROUP_ADAPTER)
    backbone_names = model.params.names_in_group(GROUP_BACKBONE)
    for a in adapter_names:
        assert moves[a] == pytest.approx(1.5e-4, rel=1e-3)
    for b in backbone_names:
        assert moves[b] == pytest.approx(3e-5, rel=1e-3)
    ratio = moves[adapter_names[0]] / moves[backbone_names[0]]
    assert ratio == pytest.approx(5.0, rel=1e-3)

    # accumulation equivalence, 64-bit, equal-length targets
    records = generate_synthetic(
        tmp_path, seed=9, n_records=4,
        config=SyntheticConfig(n_frames=4, feature_dim=16, sigma=0.1))
    corpus = [r.step_text() for r in records] + [r.summary for r in records]
    vocab = build_vocab(corpus)
    cfg = tiny_config(max_src_len=48, max_tgt_len=16, vocab_size=len(vocab))
    results = []
    for micro, accum in ((1, 4), (4, 1)):
        model = SummarizationModel.initialize(cfg, seed=7, dtype=np.float64)
        tc = TrainConfig(epochs=1, micro_batch=micro, accumulation=accum,
                         lr_backbone=1e-3, lr_adapter=5e-3, seed=0,
                         checkpoint_dir=str(tmp_path / f"eq{micro}"))
        train(model, vocab, records, records, tc, val_fn=lambda *a, **k: 0.0)
        results.append({n: t.data.copy() for n, t in model.params.items()})
    for name in results[0]:
        assert np.abs(results[0][name] - results[1][name]).max() <= 1e-6, name


# ---------------------------------------------------------------------------
# Format round-trips
# ---------------------------------------------------------------------------

@criterion("format-round-trips")
def test_format_round_trips(tmp_path):
    """Feature files and checkpoints survive write->read bit-exactly;
    magic/truncation/shape corruptions raise their named errors."""
    rng = np.random.default_rng(3)
    feats = FrameFeatureSequence(rng.normal(size=(50, 512)).astype(np.float32),
                                 np.arange(50, dtype=np.uint32))
    fpath = tmp_path / "f.csft"
    write_feature_file(fpath, feats)
    back = read_feature_file(fpath)
    assert back.features.tobytes() == feats.features.tobytes()
    assert back.source_indices.tobytes() == feats.source_indices.tobytes()

    blob = fpath.read_bytes()
    (tmp_path / "magic.csft").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FeatureFileError, match="bad magic"):
        read_feature_file(tmp_path / "magic.csft")
    (tmp_path / "trunc.csft").write_bytes(blob[:-8])
    with pytest.raises(FeatureFileError, match="truncated"):
        read_feature_file(tmp_path / "trunc.csft")

    cfg = tiny_config()
    params = init_params(cfg, seed=2, dtype=np.float64)
    state = AdamState(dict(params.items()))
    state.step = 5
    cpath = tmp_path / "m.ckpt"
    save_checkpoint(cpath, params, cfg, TrainConfig(), adam_state=state)
    loaded = load_checkpoint(cpath)
    for name, t in params.items():
        assert loaded.params[name].data.tobytes() == t.data.tobytes()
    assert loaded.adam_state.step == 5

    cblob = cpath.read_bytes()
    (tmp_path / "cm.ckpt").write_bytes(b"YYYY" + cblob[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(tmp_path / "cm.ckpt")
    (tmp_path / "ct.ckpt").write_bytes(cblob[:200])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "ct.ckpt")
    with pytest.raises(ShapeError, match="tok_emb"):
        load_checkpoint(cpath, expect_config=tiny_config(d_model=64))


# ---------------------------------------------------------------------------
# Truncation contract
# ---------------------------------------------------------------------------

@criterion("truncation-contract")
def test_truncation_contract():
    """A 600-token source encodes to exactly 512 tokens keeping the earliest
    content, bos first, eos at position 511."""
    words = [f"w{i}" for i in range(600)]
    vocab = build_vocab([" ".join(words)], max_size=700)
    ids = encode(" ".join(words), vocab, max_len=512)
    assert len(ids) == 512
    assert ids[0] == BOS_ID and ids[-1] == EOS_ID
    assert ids[1:511] == [vocab.id_of(w) for w in words[:510]]
