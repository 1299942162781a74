"""The summarization network.

Visual branch: frozen per-frame features + learned temporal positional
encodings -> small bidirectional transformer -> linear projection into the
text width.  Text branch: post-LN transformer encoder whose mid stack is
interrupted once by cross-modal attention (text queries, visual keys/values,
concat + projection + residual), then a causal decoder with source
cross-attention and an output projection tied to the token embedding.

All learnable tensors live in a ParameterStore and carry a group tag,
``backbone`` for the text stack and ``adapter`` for everything newly added
around the visual pathway; the two groups train at different rates.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .data import FrameFeatureSequence
from .numerics import Tensor, ShapeError
from .tokenizer import PAD_ID


@dataclass
class ModelConfig:
    d_model: int = 768
    d_visual: int = 512
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_heads: int = 8
    ffn_dim_text: int = 3072
    temporal_layers: int = 2
    temporal_heads: int = 4
    temporal_ffn: int = 1024
    fusion_layer: int = 5          # 1-indexed position in the encoder stack
    fusion_heads: int = 1
    max_src_len: int = 512
    max_tgt_len: int = 128
    n_frames: int = 50
    vocab_size: int = 8192
    text_only: bool = False
    dropout: float = 0.0           # reserved; no dropout path is implemented
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_visual % self.temporal_heads != 0:
            raise ValueError(
                f"d_visual {self.d_visual} not divisible by temporal_heads {self.temporal_heads}")
        if self.d_model % self.fusion_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by fusion_heads {self.fusion_heads}")
        if not 1 <= self.fusion_layer <= self.n_enc_layers:
            raise ValueError(
                f"fusion_layer must be in [1, {self.n_enc_layers}], got {self.fusion_layer}")
        for name in ("d_model", "d_visual", "n_enc_layers", "n_dec_layers", "n_heads",
                     "ffn_dim_text", "temporal_layers", "temporal_heads", "temporal_ffn",
                     "max_src_len", "max_tgt_len", "n_frames", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


GROUP_BACKBONE = "backbone"
GROUP_ADAPTER = "adapter"

_ADAPTER_PREFIXES = ("pe_visual", "temporal.", "visual_proj.", "fusion.")
_BIAS_SUFFIXES = (".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")


def _group_for(name: str) -> str:
    return GROUP_ADAPTER if name.startswith(_ADAPTER_PREFIXES) else GROUP_BACKBONE


class ParameterStore:
    """Named learnable tensors, each tagged with its parameter group."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, array: np.ndarray, dtype=np.float32) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = nm.parameter(np.asarray(array, dtype=dtype), name=name)
        self._tensors[name] = t
        self._groups[name] = _group_for(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def names_in_group(self, group: str) -> list[str]:
        return [n for n, g in self._groups.items() if g == group]

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype


def _attention_spec(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    spec = [(f"{prefix}.{p}", (d, d)) for p in ("wq", "wk", "wv", "wo")]
    spec += [(f"{prefix}.{p}", (d,)) for p in ("bq", "bk", "bv", "bo")]
    return spec


def _ffn_spec(prefix: str, d: int, hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.w1", (d, hidden)), (f"{prefix}.b1", (hidden,)),
            (f"{prefix}.w2", (hidden, d)), (f"{prefix}.b2", (d,))]


def _ln_spec(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def parameter_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) manifest of every learnable tensor.

    The order is the creation order, which pins down seeded initialization
    and lets checkpoints be validated against a config without allocating."""
    d, dv = config.d_model, config.d_visual
    spec: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (config.vocab_size, d)),
        ("pe_text", (config.max_src_len, d)),
        ("pe_dec", (config.max_tgt_len, d)),
    ]
    for i in range(config.n_enc_layers):
        spec += _attention_spec(f"enc.{i}.attn", d)
        spec += _ln_spec(f"enc.{i}.ln1", d)
        spec += _ffn_spec(f"enc.{i}.ffn", d, config.ffn_dim_text)
        spec += _ln_spec(f"enc.{i}.ln2", d)
    for i in range(config.n_dec_layers):
        spec += _attention_spec(f"dec.{i}.self_attn", d)
        spec += _ln_spec(f"dec.{i}.ln1", d)
        spec += _attention_spec(f"dec.{i}.cross_attn", d)
        spec += _ln_spec(f"dec.{i}.ln2", d)
        spec += _ffn_spec(f"dec.{i}.ffn", d, config.ffn_dim_text)
        spec += _ln_spec(f"dec.{i}.ln3", d)
    if not config.text_only:
        spec.append(("pe_visual", (config.n_frames, dv)))
        for i in range(config.temporal_layers):
            spec += _attention_spec(f"temporal.{i}.attn", dv)
            spec += _ln_spec(f"temporal.{i}.ln1", dv)
            spec += _ffn_spec(f"temporal.{i}.ffn", dv, config.temporal_ffn)
            spec += _ln_spec(f"temporal.{i}.ln2", dv)
        spec.append(("visual_proj.w", (d, dv)))
        for p in ("wq", "wk", "wv"):
            spec.append((f"fusion.{p}", (d, d)))
        spec.append(("fusion.wo", (d, 2 * d)))
        spec += _ln_spec("fusion.ln", d)
    return spec


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParameterStore:
    """Seeded init: N(0, 0.02) weights and positional embeddings, zero
    biases, unit LN gains.  Draw order follows ``parameter_spec``."""
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in parameter_spec(config):
        if name.endswith(".gain"):
            store.add(name, np.ones(shape), dtype)
        elif name.endswith(_BIAS_SUFFIXES):
            store.add(name, np.zeros(shape), dtype)
        else:
            store.add(name, rng.normal(0.0, 0.02, shape), dtype)
    return store


def validate_params(params: ParameterStore, config: ModelConfig) -> None:
    """Check that a parameter set matches a config's manifest exactly."""
    expected = dict(parameter_spec(config))
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"parameter '{name}' missing for this config")
        if params[name].shape != shape:
            raise ShapeError(
                f"parameter '{name}' has shape {params[name].shape}, "
                f"config expects {shape}")
    for name in params.names():
        if name not in expected:
            raise ShapeError(f"parameter '{name}' not part of this config")


# ---------------------------------------------------------------------------
# Attention / layer building blocks
# ---------------------------------------------------------------------------

_ATTENTION_PROBE: list[np.ndarray] | None = None


@contextlib.contextmanager
def attention_probe():
    """Collect every attention matrix computed inside the block (for tests)."""
    global _ATTENTION_PROBE
    prev = _ATTENTION_PROBE
    _ATTENTION_PROBE = collected = []
    try:
        yield collected
    finally:
        _ATTENTION_PROBE = prev


def _build_mask(n_q: int, n_k: int, key_mask: np.ndarray | None, causal: bool):
    if key_mask is None and not causal:
        return None
    mask = np.ones((n_q, n_k), dtype=bool)
    if key_mask is not None:
        mask &= np.asarray(key_mask, dtype=bool)[None, :]
    if causal:
        mask &= np.tril(np.ones((n_q, n_k), dtype=bool))
    return mask


def _attention_core(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                    mask: np.ndarray | None, d_k_override: int | None = None) -> Tensor:
    d = q.shape[1]
    dh = d // n_heads
    inv_sqrt_dk = 1.0 / math.sqrt(d_k_override if d_k_override is not None else dh)
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = nm.slice_axis(q, 1, lo, hi) if n_heads > 1 else q
        kh = nm.slice_axis(k, 1, lo, hi) if n_heads > 1 else k
        vh = nm.slice_axis(v, 1, lo, hi) if n_heads > 1 else v
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), inv_sqrt_dk)
        att = nm.softmax(scores, axis=1, mask=mask)
        if _ATTENTION_PROBE is not None:
            _ATTENTION_PROBE.append(att.data)
        heads.append(nm.matmul(att, vh))
    return nm.concat(heads, axis=1) if n_heads > 1 else heads[0]


def _mha(x_q: Tensor, x_kv: Tensor, params: ParameterStore, prefix: str, n_heads: int,
         key_mask: np.ndarray | None = None, causal: bool = False) -> Tensor:
    q = nm.add(nm.matmul(x_q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = nm.add(nm.matmul(x_kv, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = nm.add(nm.matmul(x_kv, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    mask = _build_mask(x_q.shape[0], x_kv.shape[0], key_mask, causal)
    ctx = _attention_core(q, k, v, n_heads, mask)
    return nm.add(nm.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ffn(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    h = nm.gelu(nm.add(nm.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return nm.add(nm.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(x: Tensor, params: ParameterStore, prefix: str, eps: float) -> Tensor:
    return nm.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps)


def _encoder_layer(h: Tensor, params: ParameterStore, prefix: str, n_heads: int,
                   key_mask: np.ndarray | None, eps: float) -> Tensor:
    a = _ln(nm.add(_mha(h, h, params, f"{prefix}.attn", n_heads, key_mask), h),
            params, f"{prefix}.ln1", eps)
    return _ln(nm.add(_ffn(a, params, f"{prefix}.ffn"), a), params, f"{prefix}.ln2", eps)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def encode_visual(feats, params: ParameterStore, config: ModelConfig) -> Tensor:
    """Temporal positional encoding + small bidirectional transformer.

    Frame features enter as constants: no gradient ever reaches them, which
    is what keeps the upstream feature extractor frozen by construction.
    """
    arr = feats.features if isinstance(feats, FrameFeatureSequence) else np.asarray(feats)
    if arr.shape != (config.n_frames, config.d_visual):
        raise ShapeError(
            f"visual features shape {arr.shape} does not match configured "
            f"({config.n_frames}, {config.d_visual})")
    x = nm.add(nm.constant(arr.astype(params.dtype), name="frame_features"),
               params["pe_visual"])
    for i in range(config.temporal_layers):
        x = _encoder_layer(x, params, f"temporal.{i}", config.temporal_heads,
                           None, config.ln_eps)
    return x


def project_visual(v: Tensor, params: ParameterStore) -> Tensor:
    """Bias-free linear map from visual width into the text width."""
    return nm.matmul(v, nm.transpose(params["visual_proj.w"]))


def fuse(a: Tensor, vproj: Tensor, params: ParameterStore, config: ModelConfig) -> Tensor:
    """Cross-modal attention: text queries against visual keys/values, then
    concat + projection with a text-preserving residual and layer norm."""
    if a.shape[1] != config.d_model or vproj.shape[1] != config.d_model:
        raise ShapeError(
            f"fuse: expected width {config.d_model}, got text {a.shape} / visual {vproj.shape}")
    q = nm.matmul(a, params["fusion.wq"])
    k = nm.matmul(vproj, params["fusion.wk"])
    v = nm.matmul(vproj, params["fusion.wv"])
    d_k = config.d_model // config.fusion_heads
    z = _attention_core(q, k, v, config.fusion_heads, None, d_k_override=d_k)
    cat = nm.concat([a, z], axis=1)
    out = nm.matmul(cat, nm.transpose(params["fusion.wo"]))
    return nm.layer_norm(nm.add(out, a), params["fusion.ln.gain"],
                         params["fusion.ln.bias"], config.ln_eps)


def source_mask(tokens) -> np.ndarray:
    return np.asarray(tokens, dtype=np.int64) != PAD_ID


def encoder_forward(tokens, vproj: Tensor | None, params: ParameterStore,
                    config: ModelConfig) -> Tensor:
    """Token embedding + positions, then the full encoder stack with one
    fusion interruption after the self-attention sub-layer of the configured
    layer (skipped entirely in text-only mode)."""
    n = len(tokens)
    if n < 1 or n > config.max_src_len:
        raise ShapeError(f"source length {n} outside [1, {config.max_src_len}]")
    fusing = vproj is not None
    if not fusing and not config.text_only:
        raise ShapeError("visual projection required unless the model is text-only")
    mask = source_mask(tokens)
    if not mask.any():
        raise ShapeError("source is entirely padding")
    h = nm.add(nm.embedding(params["tok_emb"], tokens),
               nm.slice_axis(params["pe_text"], 0, 0, n))
    for i in range(config.n_enc_layers):
        if fusing and (i + 1) == config.fusion_layer:
            a = _ln(nm.add(_mha(h, h, params, f"enc.{i}.attn", config.n_heads, mask), h),
                    params, f"enc.{i}.ln1", config.ln_eps)
            a = fuse(a, vproj, params, config)
            h = _ln(nm.add(_ffn(a, params, f"enc.{i}.ffn"), a),
                    params, f"enc.{i}.ln2", config.ln_eps)
        else:
            h = _encoder_layer(h, params, f"enc.{i}", config.n_heads, mask, config.ln_eps)
    return h


def decoder_forward(tgt_tokens, enc_out: Tensor, params: ParameterStore,
                    config: ModelConfig, src_mask: np.ndarray | None = None) -> Tensor:
    """Causal self-attention, source cross-attention, FFN per layer; logits
    through the transposed (tied) token embedding."""
    length = len(tgt_tokens)
    if length < 1 or length > config.max_tgt_len:
        raise ShapeError(f"target length {length} outside [1, {config.max_tgt_len}]")
    h = nm.add(nm.embedding(params["tok_emb"], tgt_tokens),
               nm.slice_axis(params["pe_dec"], 0, 0, length))
    for i in range(config.n_dec_layers):
        a1 = _ln(nm.add(_mha(h, h, params, f"dec.{i}.self_attn", config.n_heads,
                             causal=True), h),
                 params, f"dec.{i}.ln1", config.ln_eps)
        a2 = _ln(nm.add(_mha(a1, enc_out, params, f"dec.{i}.cross_attn", config.n_heads,
                             key_mask=src_mask), a1),
                 params, f"dec.{i}.ln2", config.ln_eps)
        h = _ln(nm.add(_ffn(a2, params, f"dec.{i}.ffn"), a2),
                params, f"dec.{i}.ln3", config.ln_eps)
    return nm.matmul(h, nm.transpose(params["tok_emb"]))


def forward_loss(batch, params: ParameterStore, config: ModelConfig) -> Tensor:
    """Teacher-forced negative log-likelihood, averaged over every non-pad
    target position in the batch.

    ``batch`` holds (source_ids, frame_features_or_None, summary_ids)
    triples; summaries arrive encoded as [bos, ..., eos] (+ optional pads).
    """
    if not batch:
        raise ValueError("forward_loss: empty batch")
    total = None
    count = 0
    for src_ids, feats, summary_ids in batch:
        if len(summary_ids) < 2:
            raise ValueError("forward_loss: summary must contain at least [bos, eos]")
        vproj = None
        if feats is not None and not config.text_only:
            vproj = project_visual(encode_visual(feats, params, config), params)
        enc_out = encoder_forward(src_ids, vproj, params, config)
        dec_in = list(summary_ids[:-1])
        dec_tgt = np.asarray(summary_ids[1:], dtype=np.int64)
        keep = dec_tgt != PAD_ID
        logits = decoder_forward(dec_in, enc_out, params, config,
                                 src_mask=source_mask(src_ids))
        ce = nm.cross_entropy(logits, dec_tgt, mask=keep, reduction="sum")
        total = ce if total is None else nm.add(total, ce)
        count += int(keep.sum())
    return nm.scale(total, 1.0 / count)


class SummarizationModel:
    """Convenience bundle of config + parameters for training and decoding."""

    def __init__(self, config: ModelConfig, params: ParameterStore):
        config.validate()
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "SummarizationModel":
        return cls(config, init_params(config, seed, dtype))

    def encode_source(self, src_ids, feats) -> tuple[Tensor, np.ndarray]:
        vproj = None
        if feats is not None and not self.config.text_only:
            vproj = project_visual(encode_visual(feats, self.params, self.config), self.params)
        enc_out = encoder_forward(src_ids, vproj, self.params, self.config)
        return enc_out, source_mask(src_ids)

    def decoder_logits(self, tgt_ids, enc_out: Tensor, src_mask: np.ndarray) -> np.ndarray:
        logits = decoder_forward(tgt_ids, enc_out, self.params, self.config, src_mask=src_mask)
        return logits.data

    def loss(self, batch) -> Tensor:
        return forward_loss(batch, self.params, self.config)
