"""Post-hoc controlled generation.

The pipeline samples a pool of candidate variants, scores each with a
bag-of-tokens attribute classifier, accumulates the variants' token
transitions into a positive and a negative weighted graph, ranks tokens in
each graph by damped power iteration, boosts/suppresses the top-ranked
tokens in the decoding logits, and finally picks the candidate with the
highest classifier score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (SamplerConfig, TinyLM, derive_seed, sample,
                    sample_batch)

SPECIAL_EXCLUDE = (0, 1, 2)  # pad, bos, eos never enter a ranking


@dataclass(frozen=True)
class SteeringConfig:
    """Steered-decoding knobs.

    ``num_variants`` responses feed the graphs, the ``top_k`` tokens of
    each graph form the boost/suppress masks, and ``num_final_candidates``
    steered decodes go to the final filter.  ``boost``/``suppress`` are the
    additive logit strengths; ``damping``/``tolerance`` drive the ranking
    iteration.
    """

    num_variants: int = 30
    top_k: int = 10
    num_final_candidates: int = 3
    boost: float = 4.0
    suppress: float = 6.0
    damping: float = 0.85
    tolerance: float = 1e-8

    def __post_init__(self) -> None:
        if self.boost < 0 or self.suppress < 0:
            raise ValueError("boost and suppress must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.num_final_candidates < 1:
            raise ValueError("num_final_candidates must be >= 1")
        if self.num_variants < self.num_final_candidates:
            raise ValueError("num_variants must be >= num_final_candidates")
        if not 0.0 < self.damping < 1.0:
            raise ValueError("damping must lie in (0, 1)")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "num_variants", "top_k", "num_final_candidates", "boost",
            "suppress", "damping", "tolerance")}


@dataclass(frozen=True)
class CandidateVariant:
    """A sampled response with its attribute alignment score."""

    token_ids: tuple[int, ...]
    text: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"alignment score must lie in [0, 1], got {self.score}")


@dataclass
class AttributeGraph:
    """Directed token-transition graph with accumulated edge weights."""

    nodes: set[int] = field(default_factory=set)
    weights: dict[tuple[int, int], float] = field(default_factory=dict)

    def add_edge(self, src: int, dst: int, weight: float) -> None:
        if weight < 0:
            raise ValueError("edge weights must be >= 0")
        self.nodes.add(src)
        self.nodes.add(dst)
        self.weights[(src, dst)] = self.weights.get((src, dst), 0.0) + weight


class AttributeClassifier:
    """Bag-of-tokens logistic scorer.

    ``score`` maps text to [0, 1]; 1.0 means fully aligned with the target
    attribute (clean), 0.0 means toxic.  Empty text scores ``sigmoid(bias)``.
    """

    def __init__(self, weights: dict[str, float], bias: float):
        self.weights = dict(weights)
        self.bias = float(bias)

    def score(self, text: str) -> float:
        z = self.bias
        for word in text.split():
            z += self.weights.get(word, 0.0)
        return _sigmoid(z)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {"bias": self.bias, "weights": self.weights}, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "AttributeClassifier":
        data = json.loads(Path(path).read_text())
        return cls(weights=data["weights"], bias=data["bias"])


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def train_attribute_classifier(
    samples: Sequence[tuple[str, str]], *, seed: int = 0,
    holdout_fraction: float = 0.2, iterations: int = 400,
    learning_rate: float = 0.5, l2: float = 1e-3,
) -> tuple[AttributeClassifier, float]:
    """Fit the logistic scorer on (text, label) pairs, label in {toxic, clean}.

    Full-batch gradient descent on token counts; deterministic for a fixed
    (data, seed).  Returns the classifier and its held-out accuracy (NaN
    when the holdout split is empty).
    """
    labels = {label for _, label in samples}
    if labels - {"toxic", "clean"}:
        raise ValueError(f"labels must be 'toxic' or 'clean', got {labels}")
    if len(labels) < 2:
        raise ValueError("training data needs both a toxic and a clean class")

    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(len(samples))
    k = int(round(len(samples) * holdout_fraction))
    hold = [samples[int(i)] for i in perm[:k]]
    train = [samples[int(i)] for i in perm[k:]]
    if not train:
        raise ValueError("no training samples after holdout split")

    vocab = sorted({w for text, _ in train for w in text.split()})
    index = {w: i for i, w in enumerate(vocab)}
    x = np.zeros((len(train), len(vocab)), dtype=np.float64)
    y = np.zeros(len(train), dtype=np.float64)
    for row, (text, label) in enumerate(train):
        for w in text.split():
            x[row, index[w]] += 1.0
        y[row] = 1.0 if label == "clean" else 0.0

    w = np.zeros(len(vocab), dtype=np.float64)
    b = 0.0
    n = len(train)
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        err = p - y
        w -= learning_rate * (x.T @ err / n + l2 * w)
        b -= learning_rate * float(err.mean())

    clf = AttributeClassifier({word: float(w[i]) for word, i in index.items()}, b)
    if hold:
        hits = sum(1 for text, label in hold
                   if (clf.score(text) >= 0.5) == (label == "clean"))
        accuracy = hits / len(hold)
    else:
        accuracy = float("nan")
    return clf, accuracy


def score_attribute(classifier: AttributeClassifier, text: str) -> float:
    """Alignment score in [0, 1] (1 = clean / on-attribute)."""
    return classifier.score(text)


def sample_variants(model: TinyLM, classifier: AttributeClassifier,
                    prompt_ids: Sequence[int], config: SteeringConfig,
                    sampler: SamplerConfig, seed: int) -> list[CandidateVariant]:
    """Sample ``num_variants`` scored responses with derived sub-seeds."""
    seeds = [derive_seed(seed, "variant", i) for i in range(config.num_variants)]
    outputs = sample_batch(model, prompt_ids, seeds, sampler)
    variants = []
    for ids in outputs:
        text = model.vocab.detokenize(ids)
        variants.append(CandidateVariant(token_ids=tuple(ids), text=text,
                                         score=classifier.score(text)))
    return variants


def build_attribute_graphs(
    variants: Sequence[CandidateVariant],
) -> tuple[AttributeGraph, AttributeGraph]:
    """Accumulate variant transitions into (positive, negative) graphs.

    Every consecutive token pair in a variant with score ``mu`` adds ``mu``
    to that edge in the positive graph and ``1 - mu`` in the negative one,
    so the two weights of an edge always sum to its observed transition
    count.  Variants shorter than 2 tokens contribute nodes only.
    """
    pos, neg = AttributeGraph(), AttributeGraph()
    for variant in variants:
        ids = variant.token_ids
        for tok in ids:
            pos.nodes.add(tok)
            neg.nodes.add(tok)
        for a, b in zip(ids, ids[1:]):
            pos.add_edge(a, b, variant.score)
            neg.add_edge(a, b, 1.0 - variant.score)
    return pos, neg


def rank_scores(graph: AttributeGraph, *, damping: float = 0.85,
                tolerance: float = 1e-8, max_iterations: int = 1000) -> dict[int, float]:
    """Stationary importance scores via damped power iteration.

    Out-edge weights are normalized per node; nodes with no outgoing
    weight redistribute uniformly.  The returned scores sum to 1.
    """
    if not graph.nodes:
        raise ValueError("graph has no nodes")
    nodes = sorted(graph.nodes)
    idx = {n: i for i, n in enumerate(nodes)}
    n = len(nodes)
    out_sum = np.zeros(n)
    for (src, _), w in graph.weights.items():
        out_sum[idx[src]] += w
    # Column-stochastic transition matrix over nodes with outgoing weight.
    mat = np.zeros((n, n))
    for (src, dst), w in graph.weights.items():
        if out_sum[idx[src]] > 0:
            mat[idx[dst], idx[src]] = w / out_sum[idx[src]]
    dangling = out_sum == 0

    scores = np.full(n, 1.0 / n)
    for _ in range(max_iterations):
        redistributed = scores[dangling].sum() / n
        nxt = (1.0 - damping) / n + damping * (mat @ scores + redistributed)
        if np.abs(nxt - scores).sum() < tolerance:
            scores = nxt
            break
        scores = nxt
    return {node: float(scores[idx[node]]) for node in nodes}


def rank_tokens(graph: AttributeGraph, top_k: int, *, damping: float = 0.85,
                tolerance: float = 1e-8,
                exclude: Sequence[int] = SPECIAL_EXCLUDE) -> list[int]:
    """Top ``top_k`` tokens by stationary score, ties broken by token id.

    Special tokens are excluded from the result.
    """
    scores = rank_scores(graph, damping=damping, tolerance=tolerance)
    banned = set(exclude)
    ranked = sorted((node for node in scores if node not in banned),
                    key=lambda node: (-scores[node], node))
    return ranked[:top_k]


def steered_logits(logits: np.ndarray, positive_ids: Sequence[int],
                   negative_ids: Sequence[int], boost: float,
                   suppress: float) -> np.ndarray:
    """Probability distribution from adjusted logits.

    Adds ``boost`` to every positively masked token and subtracts
    ``suppress`` from every negatively masked one (a token in both masks
    nets ``boost - suppress``), then applies softmax.
    """
    adjusted = apply_steering(logits, positive_ids, negative_ids, boost, suppress)
    z = adjusted - adjusted.max()
    p = np.exp(z)
    return p / p.sum()


def apply_steering(logits: np.ndarray, positive_ids: Sequence[int],
                   negative_ids: Sequence[int], boost: float,
                   suppress: float) -> np.ndarray:
    """Adjusted logits row ``z + boost * m_pos - suppress * m_neg``."""
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    pos_mask = np.zeros_like(logits)
    neg_mask = np.zeros_like(logits)
    pos_mask[list(positive_ids)] = 1.0
    neg_mask[list(negative_ids)] = 1.0
    return logits + boost * pos_mask - suppress * neg_mask


def make_steering_hook(positive_ids: Sequence[int], negative_ids: Sequence[int],
                       boost: float, suppress: float):
    """Logit transform for :func:`exgen.model.sample`."""
    pos = list(positive_ids)
    neg = list(negative_ids)

    def hook(row: np.ndarray) -> np.ndarray:
        return apply_steering(row, pos, neg, boost, suppress)

    return hook


@dataclass
class SteeringReport:
    """Inspection record for one controlled generation."""

    num_variants: int
    variant_scores: list[float]
    boosted_tokens: list[str]
    suppressed_tokens: list[str]
    candidate_scores: list[float]
    selected_index: int

    def to_dict(self) -> dict:
        return {
            "num_variants": self.num_variants,
            "variant_scores": self.variant_scores,
            "boosted_tokens": self.boosted_tokens,
            "suppressed_tokens": self.suppressed_tokens,
            "candidate_scores": self.candidate_scores,
            "selected_index": self.selected_index,
        }


@dataclass
class SteeringOutcome:
    """Intermediate pipeline state: variants, masks, steered candidates."""

    variants: list[CandidateVariant]
    boosted_ids: list[int]
    suppressed_ids: list[int]
    candidates: list[CandidateVariant]


def generate_steered_candidates(
    model: TinyLM, classifier: AttributeClassifier, prompt_ids: Sequence[int],
    config: SteeringConfig, sampler: SamplerConfig, seed: int,
) -> SteeringOutcome:
    """Run the steering pipeline up to candidate decoding.

    Variants -> graphs -> ranking (top_k per graph) -> steered decodes.
    Each candidate is decoded solo with the steering hook and sub-seed
    ``derive_seed(seed, "candidate", i)``, so with zero boost/suppress the
    outputs are bit-identical to plain sampling at those seeds.
    """
    variants = sample_variants(model, classifier, prompt_ids, config, sampler, seed)
    pos_graph, neg_graph = build_attribute_graphs(variants)
    boosted = rank_tokens(pos_graph, config.top_k, damping=config.damping,
                          tolerance=config.tolerance)
    suppressed = rank_tokens(neg_graph, config.top_k, damping=config.damping,
                             tolerance=config.tolerance)
    hook = make_steering_hook(boosted, suppressed, config.boost, config.suppress)
    candidates = []
    for i in range(config.num_final_candidates):
        ids = sample(model, prompt_ids,
                     SamplerConfig(temperature=sampler.temperature,
                                   top_k=sampler.top_k,
                                   max_new_tokens=sampler.max_new_tokens,
                                   seed=derive_seed(seed, "candidate", i)),
                     logit_transform=hook)
        text = model.vocab.detokenize(ids)
        candidates.append(CandidateVariant(token_ids=tuple(ids), text=text,
                                           score=classifier.score(text)))
    return SteeringOutcome(variants=variants, boosted_ids=boosted,
                           suppressed_ids=suppressed, candidates=candidates)


def select_final(candidates: Sequence[CandidateVariant] | Sequence[str],
                 classifier: AttributeClassifier) -> tuple[int, list[float]]:
    """Pick the candidate with the highest non-toxicity score.

    Returns (selected index, all scores); ties go to the lowest index.
    """
    if not candidates:
        raise ValueError("select_final needs at least one candidate")
    texts = [c.text if isinstance(c, CandidateVariant) else c for c in candidates]
    scores = [classifier.score(t) for t in texts]
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return best, scores


@dataclass
class ControlledGeneration:
    """Final output of the full steer-and-filter pipeline."""

    text: str
    candidates: list[CandidateVariant]
    scores: list[float]
    selected_index: int
    report: SteeringReport


def run_controlled_generation(
    model: TinyLM, classifier: AttributeClassifier, prompt_ids: Sequence[int],
    config: SteeringConfig, sampler: SamplerConfig, seed: int,
) -> ControlledGeneration:
    """Full pipeline: steered candidate generation plus final filtering."""
    outcome = generate_steered_candidates(model, classifier, prompt_ids,
                                          config, sampler, seed)
    selected, scores = select_final(outcome.candidates, classifier)
    report = SteeringReport(
        num_variants=len(outcome.variants),
        variant_scores=[v.score for v in outcome.variants],
        boosted_tokens=[model.vocab.tokens[i] for i in outcome.boosted_ids],
        suppressed_tokens=[model.vocab.tokens[i] for i in outcome.suppressed_ids],
        candidate_scores=scores,
        selected_index=selected,
    )
    return ControlledGeneration(text=outcome.candidates[selected].text,
                                candidates=outcome.candidates, scores=scores,
                                selected_index=selected, report=report)
