"""Overlap metrics for generated summaries.

ROUGE-1/2/L and the METEOR variant are per-example F1-style scores averaged
over the corpus; BLEU-4 is corpus-level by definition (clipped counts pooled
before the geometric mean, classic brevity penalty, no smoothing).

The METEOR here is "meteor_lite": exact + suffix-stripped stem matching
only, no synonymy or paraphrase tables, so its absolute values are not
comparable with WordNet-backed implementations.

All functions take token lists; ``evaluate_corpus`` applies the package's
tokenizer normalization to both candidate and reference so the comparison
is symmetric.  Values are stored as fractions in [0, 1] and rendered x100.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .tokenizer import tokenize

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
STEM_SUFFIXES = ("s", "es", "ed", "ing", "ly")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def rouge_n(candidate: list[str], reference: list[str], n: int) -> tuple[float, float, float]:
    """Clipped n-gram multiset overlap as (precision, recall, F1)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    n_cand = sum(cand.values())
    n_ref = sum(ref.values())
    if n_cand == 0 or n_ref == 0:
        return 0.0, 0.0, 0.0
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    p = overlap / n_cand
    r = overlap / n_ref
    return p, r, _f1(p, r)


def lcs_length(a: list[str], b: list[str]) -> int:
    """Classic dynamic program, rolling row."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                curr.append(prev[j - 1] + 1)
            else:
                curr.append(max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str]) -> tuple[float, float, float]:
    """Longest-common-subsequence (precision, recall, F1)."""
    if not candidate or not reference:
        return 0.0, 0.0, 0.0
    ell = lcs_length(candidate, reference)
    p = ell / len(candidate)
    r = ell / len(reference)
    return p, r, _f1(p, r)


def bleu4(candidates: list[list[str]], references: list[list[str]]) -> float:
    """Corpus BLEU-4: pooled clipped precisions, geometric mean, brevity
    penalty e^(1-r/c) when the candidate corpus is shorter.  Any zero
    precision zeroes the score (no smoothing)."""
    if not candidates or len(candidates) != len(references):
        raise ValueError(
            f"need equal nonempty corpora, got {len(candidates)} vs {len(references)}")
    c_total = sum(len(c) for c in candidates)
    r_total = sum(len(r) for r in references)
    if c_total == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        matched = 0
        possible = 0
        for cand, ref in zip(candidates, references):
            cg = _ngrams(cand, n)
            rg = _ngrams(ref, n)
            matched += sum(min(k, rg[g]) for g, k in cg.items())
            possible += sum(cg.values())
        if matched == 0 or possible == 0:
            return 0.0
        log_sum += math.log(matched / possible)
    bp = 1.0 if c_total > r_total else math.exp(1.0 - r_total / c_total)
    return bp * math.exp(log_sum / 4.0)


def stem(word: str) -> str:
    """Strip the first applicable suffix from the fixed list."""
    for suf in STEM_SUFFIXES:
        if word.endswith(suf) and len(word) > len(suf):
            return word[: -len(suf)]
    return word


def _align_stage(cand: list[str], ref: list[str], matched_c: list[bool],
                 matched_r: list[bool], key) -> list[tuple[int, int]]:
    # Greedy in candidate order, taking the leftmost free reference slot.
    pairs = []
    for i, c_tok in enumerate(cand):
        if matched_c[i]:
            continue
        ck = key(c_tok)
        for j, r_tok in enumerate(ref):
            if not matched_r[j] and key(r_tok) == ck:
                matched_c[i] = matched_r[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_lite(candidate: list[str], reference: list[str]) -> float:
    """Unigram alignment score with a fragmentation penalty.

    Two alignment stages (exact, then stemmed), maximal matching with
    leftmost preference.  F_mean = P*R / (alpha*P + (1-alpha)*R); penalty =
    gamma * (chunks/m)^beta over the chunk count of the alignment.
    """
    if not candidate or not reference:
        return 0.0
    matched_c = [False] * len(candidate)
    matched_r = [False] * len(reference)
    pairs = _align_stage(candidate, reference, matched_c, matched_r, key=lambda t: t)
    pairs += _align_stage(candidate, reference, matched_c, matched_r, key=stem)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r)
    pairs.sort()
    chunks = 1
    for (ci, ri), (cj, rj) in zip(pairs, pairs[1:]):
        if cj != ci + 1 or rj != ri + 1:
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


@dataclass
class MetricsReport:
    n_examples: int
    rouge1_f: list[float]
    rouge2_f: list[float]
    rougeL_f: list[float]
    meteor: list[float]
    bleu4: float

    @property
    def mean_rouge1(self) -> float:
        return sum(self.rouge1_f) / self.n_examples

    @property
    def mean_rouge2(self) -> float:
        return sum(self.rouge2_f) / self.n_examples

    @property
    def mean_rougeL(self) -> float:
        return sum(self.rougeL_f) / self.n_examples

    @property
    def mean_meteor(self) -> float:
        return sum(self.meteor) / self.n_examples

    def format_table(self) -> str:
        rows = [
            ("ROUGE-1 F1", self.mean_rouge1),
            ("ROUGE-2 F1", self.mean_rouge2),
            ("ROUGE-L F1", self.mean_rougeL),
            ("BLEU-4", self.bleu4),
            ("METEOR", self.mean_meteor),
        ]
        lines = [f"examples: {self.n_examples}"]
        lines += [f"{name:<11} {100.0 * value:5.1f}" for name, value in rows]
        return "\n".join(lines)


def evaluate_corpus(candidates: list[str], references: list[str]) -> MetricsReport:
    """Normalize both sides, then score the corpus."""
    if not candidates:
        raise ValueError("evaluate_corpus: empty corpus")
    if len(candidates) != len(references):
        raise ValueError(
            f"evaluate_corpus: {len(candidates)} candidates vs {len(references)} references")
    cand_tokens = [tokenize(c) for c in candidates]
    ref_tokens = [tokenize(r) for r in references]
    r1, r2, rl, met = [], [], [], []
    for c, r in zip(cand_tokens, ref_tokens):
        r1.append(rouge_n(c, r, 1)[2])
        r2.append(rouge_n(c, r, 2)[2])
        rl.append(rouge_l(c, r)[2])
        met.append(meteor_lite(c, r))
    return MetricsReport(
        n_examples=len(candidates),
        rouge1_f=r1, rouge2_f=r2, rougeL_f=rl, meteor=met,
        bleu4=bleu4(cand_tokens, ref_tokens),
    )
