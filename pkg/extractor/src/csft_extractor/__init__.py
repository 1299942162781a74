"""Bridge from real media to CSFT feature files: decode frames, run a frozen
image encoder, write the binary format the summarizer consumes."""

__version__ = "0.1.0"

from .extract import ExtractionJob, extract  # noqa: F401
