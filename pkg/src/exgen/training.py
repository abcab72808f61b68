"""Stage runners for the two-stage pipeline: SFT, reward model, PPO.

Every stage is deterministic for a fixed (data, config, seed): batch
shuffles, rollout seeds, and head initialization all derive from the one
stage seed, and the optimizer is plain Adam with fixed defaults.  Stage
runners emit one log record per optimizer step (step, stage, loss, mean
reward, mean KL, wall-ms) and abort on a non-finite loss.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .checkpoint import checkpoint_load, checkpoint_save
from .corpus import InstructionTriplet, PreferencePair, load_dataset, load_prompts
from .model import (DTYPE, ModelConfig, SamplerConfig, TinyLM, derive_seed,
                    sample)

STAGES = ("sft", "rm", "ppo")


class TrainingDivergedError(RuntimeError):
    """A stage produced a non-finite loss."""


class MissingCheckpointError(FileNotFoundError):
    """A stage's prerequisite checkpoint is absent."""


@dataclass(frozen=True)
class StageConfig:
    """Optimization knobs shared by the sft and rm stages.

    Defaults mirror common full-scale fine-tuning settings; the ``toy``
    preset (see :func:`toy_stage_config`) is the configuration the test
    suite actually exercises.
    """

    learning_rate: float = 1e-5
    batch_size: int = 2
    grad_accum_steps: int = 8
    epochs: int = 3
    cutoff_len: int = 2048
    holdout_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size, epochs must be positive")
        if self.grad_accum_steps < 1 or self.cutoff_len < 8:
            raise ValueError("grad_accum_steps >= 1 and cutoff_len >= 8 required")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PpoConfig:
    """PPO knobs: clip range, KL coefficient, discounting, and loop sizes."""

    clip_eps: float = 0.2
    kl_beta: float = 0.05
    gamma: float = 0.99
    gae_lambda: float = 0.95
    rollouts_per_batch: int = 16
    ppo_epochs: int = 4
    learning_rate: float = 1e-3
    num_batches: int = 12
    max_new_tokens: int = 48
    value_coef: float = 0.5
    normalize_advantages: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if min(self.rollouts_per_batch, self.ppo_epochs, self.num_batches,
               self.max_new_tokens) < 1:
            raise ValueError("loop sizes must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def toy_stage_config(stage: str) -> StageConfig:
    """Desk-scale preset: short context, larger batches, aggressive LR."""
    if stage == "sft":
        return StageConfig(learning_rate=2e-3, batch_size=8, grad_accum_steps=1,
                           epochs=2, cutoff_len=256, holdout_fraction=0.1)
    if stage == "rm":
        return StageConfig(learning_rate=5e-3, batch_size=8, grad_accum_steps=1,
                           epochs=6, cutoff_len=256, holdout_fraction=0.2)
    if stage == "ppo":
        return StageConfig(learning_rate=1e-3, batch_size=1, grad_accum_steps=1,
                           epochs=1, cutoff_len=256, holdout_fraction=0.0)
    raise ValueError(f"unknown stage {stage!r}")


def default_model_config(vocab_size: int, context_length: int = 256) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, context_length=context_length,
                       embed_dim=128, num_layers=2, num_heads=4,
                       adapter_rank=16, adapter_scale=2.0)


@dataclass
class Trajectory:
    """One sampled rollout with everything the PPO update needs."""

    prompt_ids: list[int]
    response_ids: list[int]
    old_log_probs: torch.Tensor
    ref_log_probs: torch.Tensor
    values: torch.Tensor
    rm_score: float
    rewards: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=DTYPE))
    advantages: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=DTYPE))
    value_targets: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=DTYPE))

    def __post_init__(self) -> None:
        n = len(self.response_ids)
        for name in ("old_log_probs", "ref_log_probs", "values"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length does not match the response")

    def finalize(self, rewards: torch.Tensor, advantages: torch.Tensor,
                 value_targets: torch.Tensor) -> None:
        if not torch.isfinite(advantages).all():
            raise ValueError("advantages must be finite")
        self.rewards = rewards
        self.advantages = advantages
        self.value_targets = value_targets


def _log_record(step: int, stage: str, loss: float, mean_reward: float | None,
                mean_kl: float | None, wall_ms: float) -> dict:
    return {"step": step, "stage": stage, "loss": loss,
            "mean_reward": mean_reward, "mean_kl": mean_kl,
            "wall_ms": round(wall_ms, 3)}


def _check_finite(loss: torch.Tensor, stage: str, step: int) -> None:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"{stage} stage produced non-finite loss {value} at step {step}"
        )


def split_holdout(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic (train, holdout) index split."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "holdout", 0)))
    perm = rng.permutation(n)
    k = int(round(n * fraction))
    return [int(i) for i in perm[k:]], [int(i) for i in perm[:k]]


def _adam(model: TinyLM, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.trainable_parameters(), lr=lr)


def run_sft(model: TinyLM, triplets: Sequence[InstructionTriplet],
            cfg: StageConfig, *, seed: int = 0) -> list[dict]:
    """Adapter-only supervised fine-tuning; returns per-step log records."""
    train_idx, _ = split_holdout(len(triplets), cfg.holdout_fraction, seed)
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "sft-shuffle", 0)))
    opt = _adam(model, cfg.learning_rate)
    records: list[dict] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        micro = 0
        t0 = time.perf_counter()
        opt.zero_grad()
        accum_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [triplets[train_idx[i]] for i in order[lo: lo + cfg.batch_size]]
            loss = losses.sft_loss(model, batch) / cfg.grad_accum_steps
            _check_finite(loss, "sft", step)
            loss.backward()
            accum_loss += float(loss.detach())
            micro += 1
            if micro % cfg.grad_accum_steps == 0 or lo + cfg.batch_size >= len(order):
                opt.step()
                opt.zero_grad()
                step += 1
                now = time.perf_counter()
                records.append(_log_record(step, "sft", accum_loss, None, None,
                                           (now - t0) * 1e3))
                t0 = now
                accum_loss = 0.0
    return records


def heldout_perplexity(model: TinyLM, triplets: Sequence[InstructionTriplet],
                       *, fraction: float = 0.1, seed: int = 0,
                       limit: int | None = None) -> float:
    """Corpus-level perplexity of held-out references given their prompts."""
    _, hold_idx = split_holdout(len(triplets), fraction, seed)
    if limit is not None:
        hold_idx = hold_idx[:limit]
    if not hold_idx:
        raise ValueError("holdout split is empty")
    total_lp, total_tokens = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(hold_idx), 16):
            chunk = [triplets[i] for i in hold_idx[lo: lo + 16]]
            pairs = [losses.encode_triplet(model, t) for t in chunk]
            logps, mask = losses.batch_response_log_probs(
                model, [p for p, _ in pairs], [r for _, r in pairs])
            total_lp += float((logps * mask).sum())
            total_tokens += int(mask.sum())
    return math.exp(-total_lp / total_tokens)


def _encode_pair(model: TinyLM, pair: PreferencePair):
    vocab = model.vocab
    limit = model.config.context_length - 1
    prompt = vocab.tokenize(pair.prompt)
    chosen = vocab.tokenize(pair.chosen)[: max(1, limit - len(prompt))]
    rejected = vocab.tokenize(pair.rejected)[: max(1, limit - len(prompt))]
    return prompt, chosen, rejected


def run_reward_model(model: TinyLM, pairs: Sequence[PreferencePair],
                     cfg: StageConfig, *, seed: int = 0) -> tuple[list[dict], float]:
    """Train the scalar reward head (plus adapters) on preference pairs.

    Returns (log records, held-out pairwise accuracy).
    """
    if not model.has_reward_head:
        model.add_reward_head(seed=derive_seed(seed, "reward-head", 0))
    train_idx, hold_idx = split_holdout(len(pairs), cfg.holdout_fraction, seed)
    if not train_idx:
        raise ValueError("no training pairs after holdout split")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "rm-shuffle", 0)))
    opt = _adam(model, cfg.learning_rate)
    records: list[dict] = []
    step = 0
    encoded = [_encode_pair(model, p) for p in pairs]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        micro = 0
        t0 = time.perf_counter()
        opt.zero_grad()
        accum_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [encoded[train_idx[i]] for i in order[lo: lo + cfg.batch_size]]
            prompts = [p for p, _, _ in batch]
            score_plus = losses.reward_scores(model, prompts, [c for _, c, _ in batch])
            score_minus = losses.reward_scores(model, prompts, [r for _, _, r in batch])
            loss = losses.rm_loss(score_plus, score_minus).mean() / cfg.grad_accum_steps
            _check_finite(loss, "rm", step)
            loss.backward()
            accum_loss += float(loss.detach())
            micro += 1
            if micro % cfg.grad_accum_steps == 0 or lo + cfg.batch_size >= len(order):
                opt.step()
                opt.zero_grad()
                step += 1
                now = time.perf_counter()
                records.append(_log_record(
                    step, "rm", accum_loss, float(score_plus.detach().mean()), None,
                    (now - t0) * 1e3))
                t0 = now
                accum_loss = 0.0
    accuracy = pairwise_accuracy(model, [pairs[i] for i in hold_idx]) if hold_idx else float("nan")
    return records, accuracy


def pairwise_accuracy(model: TinyLM, pairs: Sequence[PreferencePair]) -> float:
    """Fraction of pairs where the chosen response outscores the rejected."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    hits = 0
    with torch.no_grad():
        for lo in range(0, len(pairs), 16):
            batch = [_encode_pair(model, p) for p in pairs[lo: lo + 16]]
            prompts = [p for p, _, _ in batch]
            sp = losses.reward_scores(model, prompts, [c for _, c, _ in batch])
            sm = losses.reward_scores(model, prompts, [r for _, _, r in batch])
            hits += int((sp > sm).sum())
    return hits / len(pairs)


def _policy_log_probs_and_values(model: TinyLM, prompts, responses):
    """Shared-trunk teacher-forced pass: (logps, values, mask), differentiable."""
    vocab = model.vocab
    seqs = [[vocab.bos_id, *p, *r] for p, r in zip(prompts, responses)]
    max_len = max(len(s) for s in seqs)
    model._check_length(max_len)
    ids = torch.full((len(seqs), max_len), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), max_len - 1), dtype=torch.bool)
    for b, (seq, prompt) in enumerate(zip(seqs, prompts)):
        ids[b, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[b, len(prompt): len(seq) - 1] = True
    h = model.hidden(ids)
    logits = h @ model.lm_head.T
    logps = torch.log_softmax(logits[:, :-1, :], dim=-1)
    picked = logps.gather(2, ids[:, 1:].unsqueeze(-1)).squeeze(-1)
    # The value head reads the shared trunk but its regression error does
    # not flow back into the adapters; only the policy objective does.
    values = (h.detach() @ model.value_w + model.value_b)[:, :-1]
    return picked, values, mask


def _strip_eos(ids: Sequence[int], eos_id: int) -> list[int]:
    out = list(ids)
    while out and out[-1] == eos_id:
        out.pop()
    return out


def collect_rollouts(policy: TinyLM, ref_model: TinyLM, rm_model: TinyLM,
                     prompts: Sequence[str], cfg: PpoConfig, *,
                     seed: int, batch_index: int) -> list[Trajectory]:
    """Sample one response per prompt and attach everything PPO needs."""
    vocab = policy.vocab
    trajectories: list[Trajectory] = []
    sampler = SamplerConfig(temperature=1.0, top_k=0,
                            max_new_tokens=cfg.max_new_tokens, seed=0)
    prompt_ids_list, response_list = [], []
    for j, prompt in enumerate(prompts):
        prompt_ids = vocab.tokenize(prompt)
        rollout_seed = derive_seed(seed, "rollout", batch_index * len(prompts) + j)
        response = sample(policy, prompt_ids,
                          replace(sampler, seed=rollout_seed))
        if not response:
            response = [vocab.eos_id]
        prompt_ids_list.append(prompt_ids)
        response_list.append(response)

    with torch.no_grad():
        old_lp, old_values, mask = _policy_log_probs_and_values(
            policy, prompt_ids_list, response_list)
        ref_lp, ref_mask = losses.batch_response_log_probs(
            ref_model, prompt_ids_list, response_list)
        scores = losses.reward_scores(
            rm_model, prompt_ids_list,
            [_strip_eos(r, vocab.eos_id) or r for r in response_list])

    for i, (p, r) in enumerate(zip(prompt_ids_list, response_list)):
        row = mask[i]
        traj = Trajectory(
            prompt_ids=p,
            response_ids=list(r),
            old_log_probs=old_lp[i][row].detach(),
            ref_log_probs=ref_lp[i][ref_mask[i]].detach(),
            values=old_values[i][row].detach(),
            rm_score=float(scores[i]),
        )
        rewards = losses.kl_penalized_rewards(traj.rm_score, traj.old_log_probs,
                                              traj.ref_log_probs, cfg.kl_beta)
        adv, targets = losses.estimate_advantages(rewards, traj.values,
                                                  cfg.gamma, cfg.gae_lambda)
        traj.finalize(rewards, adv, targets)
        trajectories.append(traj)
    return trajectories


def run_ppo(policy: TinyLM, ref_model: TinyLM, rm_model: TinyLM,
            prompts: Sequence[str], cfg: PpoConfig, *, seed: int = 0) -> list[dict]:
    """Clipped-surrogate PPO over the prompt set; returns log records.

    The value head is attached here and trained with squared-error
    regression against the GAE value targets; adapters receive the policy
    gradient through the shared trunk.
    """
    if not policy.has_value_head:
        policy.add_value_head(seed=derive_seed(seed, "value-head", 0))
    opt = _adam(policy, cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "ppo-order", 0)))
    order = [int(i) for i in rng.permutation(len(prompts))]
    records: list[dict] = []
    for b in range(cfg.num_batches):
        t0 = time.perf_counter()
        picked = [prompts[order[(b * cfg.rollouts_per_batch + j) % len(order)]]
                  for j in range(cfg.rollouts_per_batch)]
        trajectories = collect_rollouts(policy, ref_model, rm_model, picked,
                                        cfg, seed=seed, batch_index=b)
        prompt_ids = [t.prompt_ids for t in trajectories]
        responses = [t.response_ids for t in trajectories]
        old_flat = torch.cat([t.old_log_probs for t in trajectories])
        adv_flat = torch.cat([t.advantages for t in trajectories])
        target_flat = torch.cat([t.value_targets for t in trajectories])
        if cfg.normalize_advantages and adv_flat.numel() > 1:
            adv_flat = (adv_flat - adv_flat.mean()) / (adv_flat.std() + 1e-8)

        last_loss = float("nan")
        for _ in range(cfg.ppo_epochs):
            new_lp, values, mask = _policy_log_probs_and_values(
                policy, prompt_ids, responses)
            new_flat = new_lp[mask]
            ratios = losses.importance_ratios(new_flat, old_flat)
            objective = losses.ppo_objective(ratios, adv_flat, cfg.clip_eps)
            value_loss = ((values[mask] - target_flat) ** 2).mean()
            loss = -objective + cfg.value_coef * value_loss
            _check_finite(loss, "ppo", b)
            opt.zero_grad()
            loss.backward()
            opt.step()
            last_loss = float(loss.detach())

        mean_reward = float(np.mean([t.rm_score for t in trajectories]))
        mean_kl = float((old_flat - torch.cat(
            [t.ref_log_probs for t in trajectories])).mean())
        records.append(_log_record(b + 1, "ppo", last_loss, mean_reward,
                                   mean_kl, (time.perf_counter() - t0) * 1e3))
    return records


def mean_policy_kl(policy: TinyLM, ref_model: TinyLM, prompts: Sequence[str],
                   *, max_new_tokens: int = 48, seed: int = 0) -> float:
    """Mean per-token log-ratio of policy samples against the reference."""
    vocab = policy.vocab
    total, count = 0.0, 0
    with torch.no_grad():
        for j, prompt in enumerate(prompts):
            prompt_ids = vocab.tokenize(prompt)
            response = sample(policy, prompt_ids,
                              SamplerConfig(temperature=1.0, top_k=0,
                                            max_new_tokens=max_new_tokens,
                                            seed=derive_seed(seed, "kl-eval", j)))
            if not response:
                continue
            new_lp = policy.sequence_log_prob(prompt_ids, response)
            ref_lp = ref_model.sequence_log_prob(prompt_ids, response)
            total += float((new_lp - ref_lp).sum())
            count += len(response)
    return total / max(count, 1)


def mean_reward_of_samples(policy: TinyLM, rm_model: TinyLM,
                           prompts: Sequence[str], *, max_new_tokens: int = 48,
                           seed: int = 0) -> float:
    """Mean reward-model score of fresh policy samples (paired by seed)."""
    vocab = policy.vocab
    scores = []
    with torch.no_grad():
        for j, prompt in enumerate(prompts):
            prompt_ids = vocab.tokenize(prompt)
            response = sample(policy, prompt_ids,
                              SamplerConfig(temperature=1.0, top_k=0,
                                            max_new_tokens=max_new_tokens,
                                            seed=derive_seed(seed, "rm-eval", j)))
            response = _strip_eos(response, vocab.eos_id) or response
            scores.append(float(losses.reward_score(rm_model, prompt_ids, response)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Stage orchestration
# ---------------------------------------------------------------------------

def _require_checkpoint(path, stage: str, role: str) -> Path:
    if path is None:
        raise MissingCheckpointError(f"{stage} stage requires a {role} checkpoint")
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"{role} checkpoint not found: {path}")
    return path


def write_log(records: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def train_stage(stage: str, *, data_path: str | Path, out_path: str | Path,
                seed: int = 0, stage_cfg: StageConfig | None = None,
                ppo_cfg: PpoConfig | None = None,
                model_cfg: ModelConfig | None = None,
                sft_checkpoint: str | Path | None = None,
                rm_checkpoint: str | Path | None = None,
                log_path: str | Path | None = None,
                vocab_size: int = 2048) -> dict:
    """Run one pipeline stage end to end: load data, train, save checkpoint.

    ``rm`` and ``ppo`` require the sft checkpoint; ``ppo`` additionally
    requires the rm checkpoint (the sft checkpoint is loaded twice, once as
    the trainable policy and once as the frozen reference).  Returns a
    summary dict (checkpoint path, final stats).
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    summary: dict = {"stage": stage, "seed": seed, "checkpoint": str(out_path),
                     "optimizer": "adam"}

    if stage == "sft":
        cfg = stage_cfg or toy_stage_config("sft")
        triplets = load_dataset("sft", data_path)
        if not triplets:
            raise ValueError(f"no sft records in {data_path}")
        from .vocab import build_vocab
        texts = [t.prompt() for t in triplets] + [t.reference for t in triplets]
        vocab = build_vocab(texts, max_size=vocab_size)
        mcfg = model_cfg or default_model_config(len(vocab), cfg.cutoff_len)
        model = TinyLM(mcfg, vocab, seed=derive_seed(seed, "init", 0))
        records = run_sft(model, triplets, cfg, seed=seed)
        summary["final_loss"] = records[-1]["loss"] if records else None
        summary["config"] = {"stage_cfg": vars(cfg), "model_cfg": mcfg.to_dict()}
    elif stage == "rm":
        cfg = stage_cfg or toy_stage_config("rm")
        sft_path = _require_checkpoint(sft_checkpoint, "rm", "sft")
        model = checkpoint_load(sft_path)
        pairs = load_dataset("preference", data_path)
        if not pairs:
            raise ValueError(f"no preference records in {data_path}")
        records, accuracy = run_reward_model(model, pairs, cfg, seed=seed)
        summary["holdout_accuracy"] = accuracy
        summary["config"] = {"stage_cfg": vars(cfg)}
    else:
        cfg = ppo_cfg or PpoConfig()
        sft_path = _require_checkpoint(sft_checkpoint, "ppo", "sft")
        rm_path = _require_checkpoint(rm_checkpoint, "ppo", "rm")
        model = checkpoint_load(sft_path)
        ref_model = checkpoint_load(sft_path)
        rm_model = checkpoint_load(rm_path)
        if not rm_model.has_reward_head:
            raise MissingCheckpointError("rm checkpoint lacks a reward head")
        prompts = load_prompts(data_path)
        if not prompts:
            raise ValueError(f"no prompts in {data_path}")
        records = run_ppo(model, ref_model, rm_model, prompts, cfg, seed=seed)
        summary["mean_reward_last_batch"] = records[-1]["mean_reward"]
        summary["config"] = {"ppo_cfg": vars(cfg)}

    checkpoint_save(model, out_path)
    if log_path is not None:
        write_log(records, log_path)
    summary["steps"] = len(records)
    return summary
