"""Multimodal abstractive summarization with frozen visual features fused
into a trainable text encoder-decoder via mid-layer cross-modal attention."""

__version__ = "0.1.0"
