"""Corpus-level BLEU (orders 1..4) and sentence-level averaged ROUGE-1/2/L.

BLEU aggregates clipped n-gram counts over the whole corpus before taking the
geometric mean and brevity penalty; it is not a mean of per-sentence scores.
A zero precision at any order makes the score 0 (no smoothing). ROUGE scores
are balanced F1 per pair, arithmetically averaged over the corpus.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


class MetricsError(Exception):
    pass


class EmptyCorpus(MetricsError):
    pass


@dataclass(frozen=True)
class EvalPair:
    hypothesis: tuple[str, ...] | list[str]
    reference: tuple[str, ...] | list[str]

    def __post_init__(self):
        if not self.reference:
            raise MetricsError("reference must be non-empty")


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs: list[EvalPair], max_n: int = 4) -> float:
    if not pairs:
        raise EmptyCorpus("corpus_bleu over zero pairs")
    if not 1 <= max_n <= 4:
        raise MetricsError(f"max_n must be in 1..4, got {max_n}")
    log_precisions = []
    for n in range(1, max_n + 1):
        clipped = 0
        total = 0
        for pair in pairs:
            hyp = ngram_counts(pair.hypothesis, n)
            ref = ngram_counts(pair.reference, n)
            clipped += sum(min(c, ref[g]) for g, c in hyp.items())
            total += max(0, len(pair.hypothesis) - n + 1)
        if clipped == 0 or total == 0:
            return 0.0
        log_precisions.append(math.log(clipped / total))
    c = sum(len(p.hypothesis) for p in pairs)
    r = sum(len(p.reference) for p in pairs)
    if c == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(sum(log_precisions) / max_n)


def _f1(match: float, hyp_total: float, ref_total: float) -> float:
    if hyp_total == 0 or ref_total == 0:
        return 0.0
    precision = match / hyp_total
    recall = match / ref_total
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rouge_n(pair: EvalPair, n: int) -> float:
    if not pair.hypothesis:
        return 0.0
    hyp = ngram_counts(pair.hypothesis, n)
    ref = ngram_counts(pair.reference, n)
    match = sum(min(c, ref[g]) for g, c in hyp.items())
    return _f1(match, sum(hyp.values()), sum(ref.values()))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(pair: EvalPair) -> float:
    if not pair.hypothesis:
        return 0.0
    lcs = lcs_length(pair.hypothesis, pair.reference)
    return _f1(lcs, len(pair.hypothesis), len(pair.reference))


def corpus_rouge(pairs: list[EvalPair], kind: str) -> float:
    """Arithmetic mean of per-pair ROUGE scores; kind is "1", "2" or "l"."""
    if not pairs:
        raise EmptyCorpus("corpus_rouge over zero pairs")
    if kind == "l":
        return sum(rouge_l(p) for p in pairs) / len(pairs)
    if kind in ("1", "2"):
        n = int(kind)
        return sum(rouge_n(p, n) for p in pairs) / len(pairs)
    raise MetricsError(f"unknown rouge kind {kind!r}")


def eval_report(pairs: list[EvalPair]) -> str:
    """One-row table: BLEU-1..4 then ROUGE-1/2/L."""
    cols = [f"BLEU-{n}" for n in range(1, 5)] + ["ROUGE-1", "ROUGE-2", "ROUGE-L"]
    values = [corpus_bleu(pairs, n) for n in range(1, 5)] + [
        corpus_rouge(pairs, "1"),
        corpus_rouge(pairs, "2"),
        corpus_rouge(pairs, "l"),
    ]
    header = "  ".join(f"{c:>8}" for c in cols)
    row = "  ".join(f"{v:8.4f}" for v in values)
    return header + "\n" + row + "\n"
