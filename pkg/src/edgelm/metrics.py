"""Text and performance metrics: ROUGE-1/2/L and run summaries.

ROUGE here is the F1 variant with clipped n-gram counts; tokenization for the
CLI is whitespace split with lowercase folding, no stemming or stopword
removal. Every report that embeds these scores states the variant.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

ROUGE_VARIANT = "F1, clipped counts, whitespace tokens, lowercased, no stemming"


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "RougeScore":
        if precision + recall == 0:
            return cls(precision, recall, 0.0)
        return cls(precision, recall, 2 * precision * recall / (precision + recall))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(reference, hypothesis, n: int) -> RougeScore:
    """Clipped n-gram overlap F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ref = _ngrams(list(reference), n)
    hyp = _ngrams(list(hypothesis), n)
    if not ref or not hyp:
        return RougeScore(0.0, 0.0, 0.0)
    overlap = sum((ref & hyp).values())
    return RougeScore.from_pr(overlap / sum(hyp.values()), overlap / sum(ref.values()))


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(reference, hypothesis) -> RougeScore:
    ref, hyp = list(reference), list(hypothesis)
    if not ref or not hyp:
        return RougeScore(0.0, 0.0, 0.0)
    l = lcs_length(ref, hyp)
    return RougeScore.from_pr(l / len(hyp), l / len(ref))


@dataclass
class RunRecord:
    target_forwards: int
    wall_ns: int
    tokens: list
    cache_bytes: int = 0


@dataclass
class SpeedReport:
    baseline_target_forwards: int
    method_target_forwards: int
    wall_ns_baseline: int
    wall_ns_method: int
    speedup_forwards: float
    speedup_wall: float
    memory_reduction: float
    outputs_match: bool


def summarize_runs(baseline: RunRecord, method: RunRecord,
                   baseline_bytes: Optional[int] = None,
                   method_bytes: Optional[int] = None) -> SpeedReport:
    """Forward-count and wall-clock ratios plus cache memory reduction."""
    if len(baseline.tokens) != len(method.tokens):
        raise ValueError("runs must decode the same prompts to the same length")
    b_bytes = baseline.cache_bytes if baseline_bytes is None else baseline_bytes
    m_bytes = method.cache_bytes if method_bytes is None else method_bytes
    reduction = 0.0 if b_bytes == 0 else 1.0 - m_bytes / b_bytes
    return SpeedReport(
        baseline_target_forwards=baseline.target_forwards,
        method_target_forwards=method.target_forwards,
        wall_ns_baseline=baseline.wall_ns,
        wall_ns_method=method.wall_ns,
        speedup_forwards=baseline.target_forwards / method.target_forwards,
        speedup_wall=(baseline.wall_ns / method.wall_ns
                      if method.wall_ns else float("nan")),
        memory_reduction=reduction,
        outputs_match=list(baseline.tokens) == list(method.tokens),
    )
