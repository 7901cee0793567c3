"""Mode extraction on a mixture with more modes than components.

Two crossed elongated components produce three local maxima; mean-shift
finds all of them, the Laplace weights rank them by local probability
mass, and the three samplers show why mode sampling preserves structure
that naive variance scaling loses.

Outputs land in demos/out/ (CSV + SVG).  CLI equivalents:
    qfat modes --gmm <spec.json>
    qfat sample-viz --gmm <spec.json> --n 600
"""

import json
from pathlib import Path

import numpy as np

from qfat import GmmParams, ModeFinderConfig, find_modes, sample_mode, sample_vanilla, scale_variances
from qfat.plotting import svg_points
from qfat.rng import substream

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

gmm = GmmParams(
    weights=[0.5, 0.5],
    means=[[-1.0, 0.0], [0.0, -1.0]],
    stddevs=[[1.5, 0.2], [0.2, 1.5]],
)

mode_set = find_modes(gmm, ModeFinderConfig(), substream(0, "modes"))
print(f"{mode_set.count} modes from {gmm.k} components:")
for j in range(mode_set.count):
    print(f"  mode {mode_set.modes[j]}  weight {mode_set.weights[j]:.3f}  "
          f"log p {mode_set.log_densities[j]:.3f}")

rng = substream(0, "sampling")
n = 600
vanilla = sample_vanilla(gmm, rng, n)
scaled = sample_vanilla(scale_variances(gmm, 1e-6), rng, n)
modes = np.array([sample_mode(mode_set, rng) for _ in range(n)])

# Scaled sampling collapses onto the two component means and silently drops
# the crossing mode; mode sampling keeps all three.
def near_crossing(pts):
    return np.mean(np.linalg.norm(pts - mode_set.modes[1], axis=1) < 0.25)

print(f"\nfraction of samples near the crossing mode:")
print(f"  vanilla {near_crossing(vanilla):.2f}   scaled(1e-6) {near_crossing(scaled):.2f}   "
      f"mode {near_crossing(modes):.2f}")

svg_points([("vanilla", vanilla), ("scaled(1e-6)", scaled), ("mode", modes)],
           out_dir / "mode_finding.svg",
           meta={"demo": "02_mode_finding"}, title="three modes, two components")
(out_dir / "mode_finding.json").write_text(json.dumps({
    "modes": mode_set.modes.tolist(),
    "weights": mode_set.weights.tolist(),
}, indent=2))
print(f"\nwrote {out_dir / 'mode_finding.svg'}")
