"""Goal-conditioned sequencing: steering the visit order with future states.

Trains two policies on the same two-goal demos: an unconditional one that
samples either visit order, and a goal-conditioned one that follows a
reference demo's visit order via a sliding window of its future states.
The default scale takes several minutes and lands below full quality;
pass "--full" for criterion-scale settings.
"""

import sys
import time
from collections import Counter

from qfat import PolicyConfig, QfatPolicy, SamplerSpec, TrainConfig, prepare, train
from qfat.envs import SequencingEnv, generate_sequencing_demos, rollout
from qfat.rng import substream

full = "--full" in sys.argv
seed = 11
n_demos, epochs, episodes = (600, 30, 400) if full else (450, 24, 60)

demos = generate_sequencing_demos(n_demos, noise_std=0.008, rng=substream(seed, "data"))
goal_bank = generate_sequencing_demos(100, noise_std=0.008, rng=substream(seed + 1, "bank"))

for conditional in (False, True):
    cfg = PolicyConfig(state_dim=2, action_dim=2, mixtures=4, state_history=5,
                       goal_horizon=5 if conditional else 0,
                       layers=2, heads=4, embed_dim=64, dropout=0.1)
    tcfg = TrainConfig(epochs=epochs, batch_size=256, max_lr=1e-3, min_lr=1e-6,
                       eval_every=max(1, epochs // 5), seed=seed)
    prepared = prepare(demos, cfg, tcfg, substream(seed, "data"))
    policy = QfatPolicy(cfg, substream(seed, "init"))
    t0 = time.time()
    train(policy, prepared, tcfg)
    report = rollout(policy, SequencingEnv(), SamplerSpec(kind="scaled", alpha=1e-6),
                     episodes=episodes, seed=999, normalizer=prepared.normalizer,
                     goal_bank=goal_bank if conditional else None)
    label = "conditional" if conditional else "unconditional"
    orders = Counter(ep.symbol for ep in report.episodes)
    print(f"{label}: trained {time.time() - t0:.0f}s  "
          f"success {report.success_rate:.2f}  "
          f"entropy {report.behavioral_entropy_bits:.2f} bits  "
          f"orderings {dict(orders)}")
    if conditional:
        print(f"  follows the reference ordering in "
              f"{report.goal_adherence:.0%} of successful episodes")
