"""Gaussian-mixture-headed autoregressive policies for continuous control.

A behavioral-cloning stack built on numpy: exact diagonal-GMM math with
derivatives, mean-shift mode extraction with Laplace weighting, a causal
transformer decoder with hand-written reverse-mode gradients, a training
loop with min-max normalization and history masking, synthetic multimodal
benchmark environments, and three action samplers (vanilla, variance
down-scaled, mode-based).
"""

__version__ = "0.1.0"

from .gmm import (
    SIGMA_FLOOR,
    GmmEval,
    GmmParams,
    RawHeadOutputs,
    count_active_components,
    evaluate,
    moments,
    nll_param_grads,
    raw_to_gmm,
    sample_vanilla,
    scale_variances,
)
from .modes import (
    ModeFinderConfig,
    ModeSet,
    find_modes,
    find_modes_from_seeds,
    mean_shift_step,
    sample_mode,
    seed_points,
)
from .policy import ActResult, PolicyConfig, QfatPolicy, SamplerSpec, hypercube_corners
from .training import (
    Normalizer,
    Prepared,
    TrainConfig,
    Trajectory,
    TrainingDivergence,
    checkpoint_roundtrip,
    load_policy,
    prepare,
    read_trajectories,
    save_policy,
    train,
    write_trajectories,
)
from .envs import (
    MultirouteEnv,
    RolloutReport,
    SequencingEnv,
    behavioral_entropy,
    generate_multiroute_demos,
    generate_sequencing_demos,
    rollout,
)

__all__ = [
    "SIGMA_FLOOR",
    "GmmEval",
    "GmmParams",
    "RawHeadOutputs",
    "count_active_components",
    "evaluate",
    "moments",
    "nll_param_grads",
    "raw_to_gmm",
    "sample_vanilla",
    "scale_variances",
    "ModeFinderConfig",
    "ModeSet",
    "find_modes",
    "find_modes_from_seeds",
    "mean_shift_step",
    "sample_mode",
    "seed_points",
    "ActResult",
    "PolicyConfig",
    "QfatPolicy",
    "SamplerSpec",
    "hypercube_corners",
    "Normalizer",
    "Prepared",
    "TrainConfig",
    "Trajectory",
    "TrainingDivergence",
    "checkpoint_roundtrip",
    "load_policy",
    "prepare",
    "read_trajectories",
    "save_policy",
    "train",
    "write_trajectories",
    "MultirouteEnv",
    "RolloutReport",
    "SequencingEnv",
    "behavioral_entropy",
    "generate_multiroute_demos",
    "generate_sequencing_demos",
    "rollout",
]
