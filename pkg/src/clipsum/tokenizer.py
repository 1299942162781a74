"""Corpus-driven word-level tokenizer with pad/bos/eos/unk conventions.

Normalization is lowercase + split at whitespace and punctuation boundaries
(punctuation marks become their own tokens).  The interface is deliberately
tokenizer-agnostic so a subword scheme could be swapped in behind the same
encode/decode contract.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word / single-punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """Canonical form of ``text``: its tokens joined by single spaces."""
    return " ".join(tokenize(text))


@dataclass
class Vocab:
    """Bijective token <-> id map with the four reserved ids fixed."""

    id_to_token: list[str] = field(default_factory=lambda: list(RESERVED_TOKENS))
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocab contains duplicate tokens")
        if tuple(self.id_to_token[:4]) != RESERVED_TOKENS:
            raise ValueError("first four vocab entries must be the reserved tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.id_to_token):
            raise ValueError(f"token id {idx} out of range [0, {len(self.id_to_token)})")
        return self.id_to_token[idx]


def build_vocab(corpus: list[str], max_size: int = 8192) -> Vocab:
    """Rank tokens by frequency (ties broken lexicographically), keep the top.

    The four reserved slots count against ``max_size``.
    """
    if max_size < 5:
        raise ValueError(f"max_size must be >= 5 to hold reserved tokens, got {max_size}")
    if not corpus:
        raise ValueError("corpus is empty")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - 4]]
    return Vocab(list(RESERVED_TOKENS) + kept)


def encode(text: str, vocab: Vocab, max_len: int = 512) -> list[int]:
    """Token ids wrapped as [bos, ..., eos], truncated from the end.

    When the wrapped sequence would exceed ``max_len``, content tokens are
    dropped from the end so the earliest tokens survive, and eos is placed at
    position ``max_len - 1``.
    """
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    ids = [vocab.id_of(tok) for tok in tokenize(text)]
    if len(ids) > max_len - 2:
        ids = ids[: max_len - 2]
    return [BOS_ID] + ids + [EOS_ID]


def decode(tokens: list[int], vocab: Vocab) -> str:
    """Strip special tokens (stopping at the first eos) and join with spaces."""
    out = []
    for idx in tokens:
        tok = vocab.token_of(int(idx))  # raises on out-of-range ids
        if idx == EOS_ID:
            break
        if idx in (PAD_ID, BOS_ID, UNK_ID):
            continue
        out.append(tok)
    return " ".join(out)


def save_vocab(path, vocab: Vocab) -> None:
    """One token per line; the first four lines are the reserved tokens."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.id_to_token:
            fh.write(tok + "\n")


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return Vocab(tokens)
