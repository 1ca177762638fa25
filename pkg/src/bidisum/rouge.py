"""ROUGE-N and ROUGE-L over token sequences.

Counts are clipped: an n-gram that occurs ``a`` times in the candidate and
``b`` times in the reference contributes ``min(a, b)`` matches. ROUGE-L
treats each side as one flat sequence (no sentence splitting).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _score(matches: int, cand_total: int, ref_total: int) -> RougeScore:
    p = matches / cand_total if cand_total else 0.0
    r = matches / ref_total if ref_total else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeScore(p, r, f)


def ngrams(tokens: Sequence, n: int) -> Counter:
    if n < 1:
        raise ValueError("n must be >= 1")
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence, reference: Sequence, n: int = 1) -> RougeScore:
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    matches = sum((cand & ref).values())
    return _score(matches, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> RougeScore:
    return _score(lcs_length(candidate, reference), len(candidate), len(reference))


def rouge_report(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> dict[str, RougeScore]:
    """Corpus means of R-1, R-2 and R-L (precision, recall and F1 averaged per pair)."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("no pairs to score")
    out = {}
    for name, fn in (("rouge-1", lambda c, r: rouge_n(c, r, 1)),
                     ("rouge-2", lambda c, r: rouge_n(c, r, 2)),
                     ("rouge-l", rouge_l)):
        scores = [fn(c, r) for c, r in zip(candidates, references)]
        k = len(scores)
        out[name] = RougeScore(sum(s.precision for s in scores) / k,
                               sum(s.recall for s in scores) / k,
                               sum(s.f1 for s in scores) / k)
    return out


__all__ = ["RougeScore", "ngrams", "rouge_n", "lcs_length", "rouge_l", "rouge_report"]
