"""End-to-end behavioral cloning on the multiroute task.

Generates noisy waypoint demos over four routes, trains a mixture policy,
then rolls out the three samplers and compares success, diversity, and
jitter.  A full-strength run (criterion scale) uses 1000 demos and ~40
epochs; the default here is trimmed to finish in a few minutes.  Pass
"--full" for the long version.

CLI equivalent:
    qfat gen-data --env multiroute --n 1000 --seed 7 --out demos.jsonl
    qfat train --dataset demos.jsonl --config config.json --out run/
    qfat eval --checkpoint run/best.qfat --env multiroute --sampler mode
"""

import sys
import time
from pathlib import Path

from qfat import PolicyConfig, QfatPolicy, SamplerSpec, TrainConfig, prepare, train
from qfat.envs import MultirouteEnv, generate_multiroute_demos, rollout
from qfat.plotting import svg_trajectories
from qfat.rng import substream

full = "--full" in sys.argv
out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)
seed = 7

n_demos, epochs, episodes = (1000, 40, 400) if full else (600, 16, 80)
demos = generate_multiroute_demos(n_demos, noise_std=0.02, rng=substream(seed, "data"))
print(f"{len(demos)} demos, mean length {sum(len(d) for d in demos) / len(demos):.0f}")

policy_cfg = PolicyConfig(state_dim=2, action_dim=2, mixtures=8, state_history=5,
                          layers=2, heads=4, embed_dim=64, dropout=0.1)
train_cfg = TrainConfig(epochs=epochs, batch_size=256, max_lr=1e-3, min_lr=1e-6,
                        eval_every=max(1, epochs // 10), seed=seed)
prepared = prepare(demos, policy_cfg, train_cfg, substream(seed, "data"))
policy = QfatPolicy(policy_cfg, substream(seed, "init"))

t0 = time.time()
log = train(policy, prepared, train_cfg)
print(f"trained {train_cfg.epochs} epochs in {time.time() - t0:.0f}s, "
      f"best val NLL {log.best_val_nll:.3f}")

env = MultirouteEnv()
for name, spec in [("vanilla", SamplerSpec(kind="vanilla")),
                   ("scaled(1e-6)", SamplerSpec(kind="scaled", alpha=1e-6)),
                   ("mode", SamplerSpec(kind="mode", mode_noise="none"))]:
    report = rollout(policy, env, spec, episodes=episodes, seed=1234,
                     normalizer=prepared.normalizer)
    pairs = [ep.route_pair for ep in report.episodes]
    print(f"{name:<13} success {report.success_rate:.2f}  "
          f"jitter {report.mean_jitter:.2e}  "
          f"pair split {pairs.count(1)}/{pairs.count(2)}")
    tag = name.split("(")[0]
    svg_trajectories([ep.states for ep in report.episodes],
                     out_dir / f"multiroute_{tag}.svg",
                     discs=[(env.target, env.target_radius, "#2ca02c")],
                     meta={"demo": "03_multiroute", "sampler": tag, "seed": seed},
                     title=f"multiroute / {name}")
print(f"wrote trajectory overlays to {out_dir}")
