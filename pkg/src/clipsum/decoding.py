"""Beam-search inference with repeated-n-gram blocking.

Scores are raw sums of per-token log-probabilities (no length
normalization by default; a penalty exponent exists as a knob).  Blocking is
applied to the normalized log-probabilities, so a hypothesis score always
equals the sum of the model's actual log-probs for its chosen tokens.
Ties break toward the lower token id, then the older hypothesis, making
decoding fully reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import log_softmax_np
from .tokenizer import BOS_ID, EOS_ID

NEG_INF = float("-inf")


@dataclass
class BeamHypothesis:
    tokens: list[int]
    score: float = 0.0           # sum of chosen token log-probs
    finished: bool = False
    order: int = 0               # creation index, for deterministic ties
    step_logprobs: list[float] = field(default_factory=list)


def block_repeated_ngrams(tokens: list[int], logits: np.ndarray, n: int = 3) -> np.ndarray:
    """Mask out every token that would complete an n-gram already present.

    The current (n-1)-token suffix of ``tokens`` is matched against the
    history; completions of any previously seen n-gram get -inf.  Histories
    shorter than n-1 tokens pass through untouched.  The eos token is never
    blocked, so decoding can always make progress.
    """
    if n < 1:
        raise ValueError(f"block size must be >= 1, got {n}")
    out = np.array(logits, dtype=np.float64, copy=True)
    if len(tokens) < n - 1:
        return out
    suffix = tuple(tokens[len(tokens) - (n - 1):])
    banned = set()
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i:i + n - 1]) == suffix:
            banned.add(tokens[i + n - 1])
    banned.discard(EOS_ID)
    for tok in banned:
        if 0 <= tok < out.shape[-1]:
            out[tok] = NEG_INF
    return out


def _candidate_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, token id ascending on ties."""
    ids = np.arange(scores.shape[0])
    return np.lexsort((ids, -scores))


def beam_search(model, src_ids, feats, beam: int = 5, max_len: int = 128,
                block_n: int = 3, length_penalty: float = 0.0) -> list[int]:
    """Decode one example; returns the best finished [bos, ..., eos] sequence."""
    return beam_search_hypothesis(model, src_ids, feats, beam=beam,
                                  max_len=max_len, block_n=block_n,
                                  length_penalty=length_penalty).tokens


def beam_search_hypothesis(model, src_ids, feats, beam: int = 5, max_len: int = 128,
                           block_n: int = 3,
                           length_penalty: float = 0.0) -> BeamHypothesis:
    """Full beam search returning the winning hypothesis with its score.

    A hypothesis finishes on eos or when it reaches ``max_len`` tokens.
    Search stops when the best finished score already beats every live
    hypothesis (scores can only fall as tokens append) or everything
    finished.  ``length_penalty`` divides finished scores by
    length**penalty at the final selection, default off.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    enc_out, src_mask = model.encode_source(src_ids, feats)

    counter = 1
    live = [BeamHypothesis([BOS_ID], 0.0, order=0)]
    finished: list[BeamHypothesis] = []

    while live:
        candidates = []  # (score, token_id, order, parent, logp_of_token)
        for hyp in live:
            logits = model.decoder_logits(hyp.tokens, enc_out, src_mask)[-1]
            logp = block_repeated_ngrams(hyp.tokens, log_softmax_np(logits), block_n)
            keep = min(beam, logp.shape[0])
            order = _candidate_order(logp)[:keep]
            for tok in order:
                tok = int(tok)
                if logp[tok] == NEG_INF:
                    continue
                candidates.append((hyp.score + logp[tok], tok, hyp.order, hyp, logp[tok]))
        if not candidates:
            break
        # Highest total score first; ties to lower token id, then older parent.
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, tok, _, parent, step_lp in candidates[:beam]:
            new = BeamHypothesis(parent.tokens + [tok], score, order=counter,
                                 step_logprobs=parent.step_logprobs + [step_lp])
            counter += 1
            if tok == EOS_ID or len(new.tokens) >= max_len:
                new.finished = True
                finished.append(new)
            else:
                next_live.append(new)
        live = next_live
        if finished and live:
            best_done = max(f.score for f in finished)
            if all(h.score <= best_done for h in live):
                break

    if not finished:
        # Degenerate model output; close the only thing we have.
        finished = [BeamHypothesis([BOS_ID, EOS_ID], 0.0, finished=True)]

    def ranking(h: BeamHypothesis) -> tuple:
        s = h.score
        if length_penalty:
            s = s / (len(h.tokens) ** length_penalty)
        return (-s, h.order)

    return min(finished, key=ranking)


def greedy_decode(model, src_ids, feats, max_len: int = 128, block_n: int = 3) -> list[int]:
    """Argmax decoding with the same blocking rule; independent of
    beam_search so the two can be checked against each other."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    enc_out, src_mask = model.encode_source(src_ids, feats)
    tokens = [BOS_ID]
    while len(tokens) < max_len:
        logits = model.decoder_logits(tokens, enc_out, src_mask)[-1]
        logp = block_repeated_ngrams(tokens, log_softmax_np(logits), block_n)
        tok = int(np.argmax(logp))  # argmax takes the lowest index on ties
        tokens.append(tok)
        if tok == EOS_ID:
            break
    return tokens


def recompute_score(model, src_ids, feats, tokens: list[int]) -> float:
    """Sum of the model's log-probs along ``tokens`` (oracle for scores)."""
    enc_out, src_mask = model.encode_source(src_ids, feats)
    total = 0.0
    for t in range(1, len(tokens)):
        logits = model.decoder_logits(tokens[:t], enc_out, src_mask)[-1]
        total += float(log_softmax_np(logits)[tokens[t]])
    return total
