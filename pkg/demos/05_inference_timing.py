"""Where inference time goes: backbone forward vs head decode vs sampling.

The action head is a single linear layer plus cheap activations, so
decoding the mixture parameters costs a small fraction of the transformer
forward pass, and vanilla/scaled sampling are nearly free.  Mode sampling
pays for the mean-shift iterations but stays in the same millisecond class.

CLI equivalent:  qfat bench --reps 1000
"""

import time

import numpy as np

from qfat import ModeFinderConfig, PolicyConfig, QfatPolicy, find_modes, sample_mode, sample_vanilla, scale_variances
from qfat.rng import substream

cfg = PolicyConfig(state_dim=30, action_dim=9, mixtures=4, state_history=10,
                   layers=6, heads=8, embed_dim=128, dropout=0.1)
policy = QfatPolicy(cfg, substream(0, "init"))
rng = substream(0, "bench")
policy.store.params["head.w"][...] = 0.02 * rng.standard_normal(
    policy.store.params["head.w"].shape).astype(np.float32)
states = rng.uniform(-1, 1, (1, cfg.state_history, cfg.state_dim)).astype(np.float32)


def backbone():
    return policy.decoder.forward(policy.in_proj.forward(states))


h_last = backbone()[0, -1]


def head():
    return policy.head_decode(h_last)


dist = head()
sample_rng = substream(0, "sampling")
components = {
    "backbone forward": backbone,
    "head decode": head,
    "vanilla sampling": lambda: sample_vanilla(dist, sample_rng, 1),
    "scaled sampling": lambda: sample_vanilla(scale_variances(dist, 1e-6), sample_rng, 1),
    "mode sampling": lambda: sample_mode(
        find_modes(dist, ModeFinderConfig(), substream(0, "modes")), sample_rng),
}

print(f"{'component':<18}{'mean (ms)':>12}{'p95 (ms)':>12}")
times = {}
for name, fn in components.items():
    for _ in range(20):
        fn()
    samples = np.empty(300)
    for i in range(samples.size):
        t0 = time.perf_counter()
        fn()
        samples[i] = (time.perf_counter() - t0) * 1e3
    times[name] = samples.mean()
    print(f"{name:<18}{samples.mean():>12.4f}{np.percentile(samples, 95):>12.4f}")

frac = (times["head decode"] + times["vanilla sampling"]) / times["backbone forward"]
print(f"\nhead decode + vanilla sampling = {frac:.1%} of the backbone forward pass")
