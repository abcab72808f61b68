"""Training objectives: SFT likelihood, pairwise reward loss, PPO pieces.

All functions build double-precision torch graphs, so analytic gradients
can be checked against central finite differences.  The PPO helpers are
plain per-token math over 1-D tensors; batching and rollout plumbing live
in :mod:`exgen.training`.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .model import DTYPE, TinyLM


def _as_1d(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE) if not isinstance(x, torch.Tensor) else x
    if t.dim() != 1:
        raise ValueError(f"{name} must be 1-D, got shape {tuple(t.shape)}")
    return t


def _check_same_length(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"{what}: lengths differ ({a.shape[0]} vs {b.shape[0]})")


def batch_response_log_probs(
    model: TinyLM,
    prompts: Sequence[Sequence[int]],
    responses: Sequence[Sequence[int]],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced per-token log-probs for a right-padded batch.

    Returns ``(logps, mask)`` where both are (batch, max_len - 1): ``logps``
    holds the log-probability of each next token and ``mask`` is True
    exactly on response positions.  Differentiable.
    """
    if len(prompts) != len(responses):
        raise ValueError("prompts and responses must pair up")
    vocab = model.vocab
    seqs = [[vocab.bos_id, *p, *r] for p, r in zip(prompts, responses)]
    max_len = max(len(s) for s in seqs)
    model._check_length(max_len)
    ids = torch.full((len(seqs), max_len), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), max_len - 1), dtype=torch.bool)
    for b, (seq, prompt) in enumerate(zip(seqs, prompts)):
        ids[b, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        start = 1 + len(prompt)
        mask[b, start - 1: len(seq) - 1] = True
    logits = model.forward(ids)
    logps = F.log_softmax(logits[:, :-1, :], dim=-1)
    picked = logps.gather(2, ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    return picked, mask


def nll_loss(model: TinyLM, prompts: Sequence[Sequence[int]],
             responses: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean over the batch of the summed response negative log-likelihood.

    Prompt tokens are masked out of the sum; only adapter (and head)
    parameters receive gradients because the base model is frozen.
    """
    logps, mask = batch_response_log_probs(model, prompts, responses)
    return -(logps * mask).sum() / len(prompts)


def sft_loss(model: TinyLM, batch) -> torch.Tensor:
    """Supervised fine-tuning loss over a batch of instruction triplets.

    Each reference is tokenized and terminated with eos, which is predicted
    like any other response token.
    """
    prompts, responses = [], []
    for triplet in batch:
        p, r = encode_triplet(model, triplet)
        prompts.append(p)
        responses.append(r)
    return nll_loss(model, prompts, responses)


def encode_triplet(model: TinyLM, triplet) -> tuple[list[int], list[int]]:
    """Token ids for (rendered prompt, reference + eos), truncated to fit."""
    vocab = model.vocab
    prompt = vocab.tokenize(triplet.prompt())
    response = vocab.tokenize(triplet.reference) + [vocab.eos_id]
    budget = model.config.context_length - 1 - len(prompt)
    if budget < 1:
        raise ValueError("prompt alone exceeds the context window")
    return prompt, response[:budget]


def rm_loss(score_plus, score_minus) -> torch.Tensor:
    """Pairwise ranking loss ``-log sigmoid(score_plus - score_minus)``.

    Uses softplus for log-sum-exp stability, so it stays finite for any
    score gap.  At a gap of zero the loss is exactly ln 2.
    """
    plus = torch.as_tensor(score_plus, dtype=DTYPE)
    minus = torch.as_tensor(score_minus, dtype=DTYPE)
    return F.softplus(-(plus - minus))


def reward_score(model: TinyLM, prompt_ids: Sequence[int],
                 response_ids: Sequence[int]) -> torch.Tensor:
    """Scalar reward: head projection of the last hidden state of
    ``[bos] + prompt + response``."""
    if model.reward_w is None:
        raise RuntimeError("model has no reward head")
    ids = torch.tensor([model.vocab.bos_id, *prompt_ids, *response_ids],
                       dtype=torch.long)
    h = model.hidden(ids)[0, -1]
    return h @ model.reward_w + model.reward_b


def reward_scores(model: TinyLM, prompts: Sequence[Sequence[int]],
                  responses: Sequence[Sequence[int]]) -> torch.Tensor:
    """Batched :func:`reward_score`; returns shape (batch,)."""
    if model.reward_w is None:
        raise RuntimeError("model has no reward head")
    vocab = model.vocab
    seqs = [[vocab.bos_id, *p, *r] for p, r in zip(prompts, responses)]
    max_len = max(len(s) for s in seqs)
    model._check_length(max_len)
    ids = torch.full((len(seqs), max_len), vocab.pad_id, dtype=torch.long)
    last = torch.tensor([len(s) - 1 for s in seqs], dtype=torch.long)
    for b, seq in enumerate(seqs):
        ids[b, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    h = model.hidden(ids)
    h_last = h[torch.arange(len(seqs)), last]
    return h_last @ model.reward_w + model.reward_b


def importance_ratios(new_log_probs, old_log_probs) -> torch.Tensor:
    """Per-token policy ratios ``exp(logp_new - logp_old)``."""
    new_lp = _as_1d(new_log_probs, "new_log_probs")
    old_lp = _as_1d(old_log_probs, "old_log_probs")
    _check_same_length(new_lp, old_lp, "importance_ratios")
    return torch.exp(new_lp - old_lp)


def ppo_objective(ratios, advantages, clip_eps: float) -> torch.Tensor:
    """Clipped surrogate objective (to be maximized).

    Mean over tokens of ``min(r_t * A_t, clip(r_t, 1-eps, 1+eps) * A_t)``.
    """
    if not 0.0 < clip_eps < 1.0:
        raise ValueError("clip_eps must lie in (0, 1)")
    r = _as_1d(ratios, "ratios")
    adv = _as_1d(advantages, "advantages")
    _check_same_length(r, adv, "ppo_objective")
    clipped = torch.clamp(r, 1.0 - clip_eps, 1.0 + clip_eps)
    return torch.minimum(r * adv, clipped * adv).mean()


def kl_penalized_rewards(rm_score, new_log_probs, ref_log_probs,
                         beta: float) -> torch.Tensor:
    """Per-token rewards: ``-beta * (logp_new - logp_ref)`` everywhere, with
    the reward-model score added at the final token.

    ``beta = 0`` recovers a pure terminal reward.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    new_lp = _as_1d(new_log_probs, "new_log_probs")
    ref_lp = _as_1d(ref_log_probs, "ref_log_probs")
    _check_same_length(new_lp, ref_lp, "kl_penalized_rewards")
    rewards = -beta * (new_lp - ref_lp)
    if rewards.shape[0] > 0:
        rewards = rewards.clone()
        rewards[-1] = rewards[-1] + torch.as_tensor(rm_score, dtype=DTYPE)
    return rewards


def estimate_advantages(rewards, values, gamma: float,
                        lam: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Generalized advantage estimation.

    ``delta_t = r_t + gamma * V_{t+1} - V_t`` with ``V_T = 0`` at the
    terminal step, then ``A_t = delta_t + gamma * lam * A_{t+1}``.  Returns
    ``(advantages, value_targets)`` where targets are ``A_t + V_t``.
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    r = _as_1d(rewards, "rewards").detach()
    v = _as_1d(values, "values").detach()
    _check_same_length(r, v, "estimate_advantages")
    n = r.shape[0]
    adv = torch.zeros(n, dtype=DTYPE)
    running = 0.0
    for t in range(n - 1, -1, -1):
        next_value = v[t + 1] if t + 1 < n else torch.tensor(0.0, dtype=DTYPE)
        delta = r[t] + gamma * next_value - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + v
