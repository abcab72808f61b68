"""Evaluation metrics: BLEU, ROUGE-N, ROUGE-L, perplexity.

All scores live in [0, 1] internally and are multiplied by 100 only at
display time.  BLEU uses uniform n-gram weights, clipped precision, and
the standard brevity penalty; a single zero precision zeroes the score
unless smoothing is requested.  ROUGE-N is clipped-count recall.  ROUGE-L
is LCS-based recall against the reference.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .model import TinyLM


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: Sequence, reference: Sequence, max_n: int = 4,
         smooth: bool = False) -> float:
    """BLEU with uniform weights 1/max_n and brevity penalty
    ``min(1, exp(1 - ref_len/hyp_len))``.

    Without smoothing any zero n-gram precision makes the score 0; with
    ``smooth=True`` zero counts get an add-one numerator/denominator.
    An empty hypothesis scores 0.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    hyp, ref = list(hypothesis), list(reference)
    if not hyp:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        hyp_counts = ngram_counts(hyp, n)
        ref_counts = ngram_counts(ref, n)
        total = sum(hyp_counts.values())
        clipped = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        if total == 0 or clipped == 0:
            if not smooth:
                return 0.0
            clipped, total = clipped + 1, total + 1
        log_sum += math.log(clipped / total) / max_n
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum)


def rouge_n(hypothesis: Sequence, reference: Sequence, n: int) -> float:
    """Clipped-count n-gram recall against the reference.

    Sum over the reference's distinct n-grams of min(hypothesis count,
    reference count), divided by the reference's total n-gram count.
    Returns 0.0 when the reference is shorter than n (undefined case;
    :func:`rouge_defined` distinguishes it).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ref_counts = ngram_counts(list(reference), n)
    if not ref_counts:
        return 0.0
    hyp_counts = ngram_counts(list(hypothesis), n)
    overlap = sum(min(hyp_counts[g], c) for g, c in ref_counts.items())
    return overlap / sum(ref_counts.values())


def rouge_defined(reference: Sequence, n: int) -> bool:
    return len(reference) >= n


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Sequence, reference: Sequence) -> float:
    """Recall-oriented LCS score: ``LCS(hyp, ref) / len(ref)``.

    Returns 0.0 for an empty reference (undefined case).
    """
    ref = list(reference)
    if not ref:
        return 0.0
    return lcs_length(list(hypothesis), ref) / len(ref)


def perplexity_from_log_probs(log_probs: Sequence[float]) -> float:
    """``exp(-mean(log_probs))``; the empty sequence is undefined."""
    lps = list(log_probs)
    if not lps:
        raise ValueError("perplexity needs at least one token")
    return math.exp(-sum(lps) / len(lps))


def perplexity(model: TinyLM, token_ids: Sequence[int]) -> float:
    """Model perplexity of a token sequence (conditioned on bos)."""
    if not token_ids:
        raise ValueError("perplexity needs at least one token")
    with torch.no_grad():
        lps = model.sequence_log_prob([], list(token_ids))
    return perplexity_from_log_probs([float(x) for x in lps])


@dataclass
class SampleMetrics:
    sample_id: str
    bleu4: float
    rouge1: float
    rouge2: float
    rougeL: float
    ppl: float
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"id": self.sample_id, "bleu4": self.bleu4, "rouge1": self.rouge1,
                "rouge2": self.rouge2, "rougeL": self.rougeL, "ppl": self.ppl,
                "flags": self.flags}


@dataclass
class MetricReport:
    """Per-sample metric rows plus corpus-level arithmetic means."""

    rows: list[SampleMetrics]

    @property
    def bleu4(self) -> float:
        return _mean([r.bleu4 for r in self.rows])

    @property
    def rouge1(self) -> float:
        return _mean([r.rouge1 for r in self.rows])

    @property
    def rouge2(self) -> float:
        return _mean([r.rouge2 for r in self.rows])

    @property
    def rougeL(self) -> float:
        return _mean([r.rougeL for r in self.rows])

    @property
    def ppl(self) -> float:
        return _mean([r.ppl for r in self.rows])

    def summary(self) -> dict:
        return {"id": "summary", "bleu4": self.bleu4, "rouge1": self.rouge1,
                "rouge2": self.rouge2, "rougeL": self.rougeL, "ppl": self.ppl,
                "samples": len(self.rows)}

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row.to_dict()) + "\n")
            fh.write(json.dumps(self.summary()) + "\n")


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


def evaluate_run(model: TinyLM, hypotheses: Sequence[str],
                 references: Sequence[str],
                 ids: Sequence[str] | None = None) -> MetricReport:
    """Score each hypothesis against its reference and the model.

    BLEU/ROUGE compare whitespace tokens of hypothesis vs reference;
    perplexity is the model's own fit to each hypothesis text.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must pair up")
    if not hypotheses:
        raise ValueError("nothing to evaluate")
    if ids is None:
        ids = [str(i) for i in range(len(hypotheses))]
    rows = []
    for sample_id, hyp_text, ref_text in zip(ids, hypotheses, references):
        hyp, ref = hyp_text.split(), ref_text.split()
        flags = []
        if not rouge_defined(ref, 2):
            flags.append("rouge2-undefined")
        if not ref:
            flags.append("rougeL-undefined")
        hyp_ids = model.vocab.tokenize(hyp_text)
        if hyp_ids:
            ppl = perplexity(model, hyp_ids)
        else:
            ppl = float("nan")
            flags.append("ppl-undefined")
        rows.append(SampleMetrics(
            sample_id=str(sample_id),
            bleu4=bleu(hyp, ref),
            rouge1=rouge_n(hyp, ref, 1),
            rouge2=rouge_n(hyp, ref, 2),
            rougeL=rouge_l(hyp, ref),
            ppl=ppl,
            flags=flags,
        ))
    return MetricReport(rows=rows)
