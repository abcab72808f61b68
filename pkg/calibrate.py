"""Full-scale calibration run for tuning acceptance-test parameters.

Trains the whole pipeline on the acceptance-sized corpus and prints the
quantities the acceptance criteria measure. Artifacts land in /tmp/calib.
"""
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from exgen.corpus import CorpusConfig, synthesize_toy_corpus, load_dataset, load_prompts
from exgen.vocab import build_vocab
from exgen.model import TinyLM, SamplerConfig, sample, derive_seed
from exgen.checkpoint import checkpoint_save, checkpoint_load
from exgen.training import (toy_stage_config, run_sft, run_reward_model, run_ppo,
                            heldout_perplexity, default_model_config, PpoConfig,
                            mean_reward_of_samples, mean_policy_kl)
from exgen.control import (train_attribute_classifier, SteeringConfig,
                           run_controlled_generation)

OUT = Path("/tmp/calib")
OUT.mkdir(exist_ok=True)
SEED = 20250809
t_start = time.time()

def log(msg):
    print(f"[{time.time()-t_start:7.1f}s] {msg}", flush=True)

paths = synthesize_toy_corpus(
    CorpusConfig(num_sft=2000, num_pref=200, num_prompts=200, toxic_marker_rate=0.4),
    SEED, OUT)
trips = load_dataset("sft", paths["sft"])
pairs = load_dataset("preference", paths["preference"])
prompts = load_prompts(paths["ppo_prompts"])
texts = [t.prompt() for t in trips] + [t.reference for t in trips]
vocab = build_vocab(texts)
log(f"corpus ready; vocab={len(vocab)}")

mcfg = default_model_config(len(vocab), 256)
model = TinyLM(mcfg, vocab, seed=derive_seed(SEED, "init", 0))
ppl0 = heldout_perplexity(model, trips, fraction=0.1, seed=SEED, limit=60)
log(f"untrained holdout ppl: {ppl0:.1f}")

cfg = toy_stage_config("sft")
recs = run_sft(model, trips, cfg, seed=SEED)
ppl1 = heldout_perplexity(model, trips, fraction=0.1, seed=SEED, limit=60)
log(f"sft done: {len(recs)} steps, loss {recs[0]['loss']:.1f} -> {recs[-1]['loss']:.1f}; "
    f"ppl {ppl1:.1f} (drop {100*(1-ppl1/ppl0):.1f}%)")
checkpoint_save(model, OUT / "sft.rceg")

# marker emission probe on the sft model
def marker_fraction(m, n=60, max_new=32, label="probe"):
    hits = 0
    for i in range(n):
        ids = sample(m, vocab.tokenize(prompts[i % len(prompts)]),
                     SamplerConfig(temperature=1.0, max_new_tokens=max_new,
                                   seed=derive_seed(SEED, label, i)))
        if "toxmark" in vocab.detokenize(ids).split():
            hits += 1
    return hits / n

for mx in (32, 48, 64):
    log(f"sft marker fraction ({mx} tok): {marker_fraction(model, max_new=mx, label=f'probe{mx}'):.2f}")
sample_text = vocab.detokenize(sample(model, vocab.tokenize(prompts[0]),
                               SamplerConfig(temperature=1.0, max_new_tokens=60, seed=1)))
log(f"sft sample: {sample_text[:220]}")

# reward model
rm_model = checkpoint_load(OUT / "sft.rceg")
rm_recs, acc = run_reward_model(rm_model, pairs, toy_stage_config("rm"), seed=SEED)
log(f"rm done: {len(rm_recs)} steps, holdout accuracy {acc:.3f}")
checkpoint_save(rm_model, OUT / "rm.rceg")

# classifier
samples = [(p.chosen, "clean") for p in pairs] + [(p.rejected, "toxic") for p in pairs]
clf, clf_acc = train_attribute_classifier(samples, seed=SEED)
log(f"classifier holdout accuracy: {clf_acc:.3f}; "
    f"marker weight {clf.weights.get('toxmark', 0.0):.2f}")

# ppo
policy = checkpoint_load(OUT / "sft.rceg")
ref = checkpoint_load(OUT / "sft.rceg")
pcfg = PpoConfig()
pre_reward = mean_reward_of_samples(policy, rm_model, prompts[:40], seed=SEED)
log(f"pre-ppo mean reward: {pre_reward:.3f}")
ppo_recs = run_ppo(policy, ref, rm_model, prompts, pcfg, seed=SEED)
post_reward = mean_reward_of_samples(policy, rm_model, prompts[:40], seed=SEED)
log(f"ppo done ({len(ppo_recs)} batches): reward {pre_reward:.3f} -> {post_reward:.3f}")
for r in ppo_recs:
    log(f"  ppo batch {r['step']}: loss {r['loss']:.3f} reward {r['mean_reward']:.3f} kl {r['mean_kl']:.4f}")
checkpoint_save(policy, OUT / "ppo.rceg")

# control efficacy probe on the SFT model (higher marker rate than post-ppo)
steer = SteeringConfig()
sampler = SamplerConfig(temperature=1.0, max_new_tokens=48)
n_ctl = 40
plain_hits = steered_hits = 0
plain_scores, steered_scores = [], []
t_ctl = time.time()
for i in range(n_ctl):
    p_ids = vocab.tokenize(prompts[i])
    plain = sample(model, p_ids, replace(sampler, seed=derive_seed(SEED, "ctl-plain", i)))
    plain_text = vocab.detokenize(plain)
    plain_hits += "toxmark" in plain_text.split()
    plain_scores.append(clf.score(plain_text))
    out = run_controlled_generation(model, clf, p_ids, steer, sampler,
                                    derive_seed(SEED, "ctl", i))
    steered_hits += "toxmark" in out.text.split()
    steered_scores.append(out.scores[out.selected_index])
log(f"control probe ({n_ctl} prompts, {(time.time()-t_ctl):.0f}s): "
    f"marker {plain_hits}/{n_ctl} -> {steered_hits}/{n_ctl}; "
    f"clf score {np.mean(plain_scores):.3f} -> {np.mean(steered_scores):.3f}")
log("calibration complete")
