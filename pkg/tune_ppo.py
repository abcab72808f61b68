"""PPO hyperparameter probe against the saved calibration checkpoints."""
import sys
import time
from pathlib import Path

from exgen.checkpoint import checkpoint_load
from exgen.corpus import load_prompts
from exgen.training import PpoConfig, run_ppo, mean_reward_of_samples

OUT = Path("/tmp/calib")
SEED = 20250809

name = sys.argv[1]
cfg = PpoConfig(**eval(sys.argv[2]))
prompts = load_prompts(OUT / "ppo_prompts.jsonl")

policy = checkpoint_load(OUT / "sft.rceg")
ref = checkpoint_load(OUT / "sft.rceg")
rm = checkpoint_load(OUT / "rm.rceg")

t0 = time.time()
pre = mean_reward_of_samples(policy, rm, prompts[:100], seed=SEED)
print(f"[{name}] pre-ppo reward: {pre:.3f} ({time.time()-t0:.0f}s)", flush=True)
recs = run_ppo(policy, ref, rm, prompts, cfg, seed=SEED)
post = mean_reward_of_samples(policy, rm, prompts[:100], seed=SEED)
batch_rewards = [r["mean_reward"] for r in recs]
print(f"[{name}] post-ppo reward: {post:.3f} (delta {post-pre:+.3f}); "
      f"batch rewards {batch_rewards[:3]} ... {batch_rewards[-3:]}; "
      f"kl last {recs[-1]['mean_kl']:.3f}; total {time.time()-t0:.0f}s", flush=True)
