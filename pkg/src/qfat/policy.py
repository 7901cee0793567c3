"""Sequence-to-action policy with a Gaussian-mixture head.

Raw state windows (and optional goal windows, which are just future states)
are projected by one shared linear layer into the decoder's embedding
space; a learned type embedding distinguishes goal tokens from state
tokens.  Each state position's decoder output is mapped by a single linear
head to k*(1 + 2*m) numbers: mixture logits, component means, and stddev
pre-activations (softplus + floor).  Action chunks of length
`action_horizon` are treated as one m*horizon-dimensional action.

Mixture means are initialized on maximally separated corners of the
[-1, 1] action hypercube with unit stddev, which lets an overspecified
mixture prune itself during training instead of collapsing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import gmm as gmm_mod
from .backbone import Decoder, Linear, ParameterStore
from .gmm import SIGMA_FLOOR, GmmParams, RawHeadOutputs, raw_to_gmm
from .modes import ModeFinderConfig, ModeSet, find_modes, sample_mode

# softplus(x) = 1  =>  x = log(e - 1); gives unit stddev before flooring
UNIT_SIGMA_PREACT = float(np.log(np.expm1(1.0)))


@dataclass(frozen=True)
class PolicyConfig:
    state_dim: int
    action_dim: int
    mixtures: int
    state_history: int
    goal_horizon: int = 0
    layers: int = 2
    heads: int = 4
    embed_dim: int = 64
    dropout: float = 0.1
    action_horizon: int = 1

    def __post_init__(self):
        if self.state_history < 1 or self.mixtures < 1 or self.action_horizon < 1:
            raise ValueError("state_history, mixtures, action_horizon must be >= 1")
        if self.goal_horizon < 0:
            raise ValueError("goal_horizon must be >= 0")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def target_dim(self) -> int:
        """Dimensionality of one prediction target (action chunk)."""
        return self.action_dim * self.action_horizon

    @property
    def head_width(self) -> int:
        return self.mixtures * (1 + 2 * self.target_dim)

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in (
            "state_dim", "action_dim", "mixtures", "state_history", "goal_horizon",
            "layers", "heads", "embed_dim", "dropout", "action_horizon")}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PolicyConfig":
        return cls(**d)


@dataclass(frozen=True)
class SamplerSpec:
    """Which action sampler to use: vanilla | scaled (alpha) | mode (noise)."""

    kind: str = "vanilla"
    alpha: float = 1.0
    mode_noise: str = "none"
    noise_scale: float = SIGMA_FLOOR

    def __post_init__(self):
        if self.kind not in ("vanilla", "scaled", "mode"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.mode_noise not in ("none", "fixed", "laplace"):
            raise ValueError(f"unknown mode noise {self.mode_noise!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "alpha": self.alpha,
                "mode_noise": self.mode_noise, "noise_scale": self.noise_scale}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SamplerSpec":
        return cls(**d)


@dataclass
class ActResult:
    """One sampled action chunk plus the distribution it came from."""

    actions: np.ndarray            # (action_horizon, m), normalized units
    gmm: GmmParams
    mode_set: ModeSet | None = None
    degraded: bool = False


def hypercube_corners(dim: int, count: int) -> np.ndarray:
    """`count` corners of {-1, 1}^dim, greedily max-min separated.

    Selection starts at the all-minus corner and repeatedly adds the corner
    farthest (in minimum distance) from those already chosen, ties broken
    by corner index; for count > 2^dim the sequence repeats.
    """
    if dim > 16:
        raise ValueError("hypercube initialization supports at most 16 target dims")
    n = 1 << dim
    idx = np.arange(n)
    corners = ((idx[:, None] >> np.arange(dim)) & 1) * 2.0 - 1.0  # (n, dim)
    chosen = [0]
    while len(chosen) < min(count, n):
        d = np.linalg.norm(corners[:, None, :] - corners[chosen][None, :, :], axis=-1)
        min_d = d.min(axis=1)
        min_d[chosen] = -1.0
        chosen.append(int(np.argmax(min_d)))
    order = [chosen[i % len(chosen)] for i in range(count)]
    return corners[order]


class QfatPolicy:
    """Transformer decoder + GMM head over state/goal token windows."""

    def __init__(self, config: PolicyConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.store = ParameterStore(dtype)
        c = config
        self.in_proj = Linear(self.store, "in_proj", c.state_dim, c.embed_dim, rng)
        self.type_emb = self.store.add("type_emb", np.zeros((2, c.embed_dim)))
        self.mask_token = self.store.add("mask_token", np.zeros(c.state_dim))
        self.decoder = Decoder(self.store, "decoder", c.layers, c.heads, c.embed_dim,
                               max_len=c.goal_horizon + c.state_history,
                               dropout=c.dropout, rng=rng)
        self.head = Linear(self.store, "head", c.embed_dim, c.head_width, rng, zero_init=True)
        self._init_head_bias()
        self._cache: dict[str, Any] | None = None

    def _init_head_bias(self):
        c = self.config
        bias = np.zeros(c.head_width)
        corners = hypercube_corners(c.target_dim, c.mixtures)
        bias[c.mixtures: c.mixtures * (1 + c.target_dim)] = corners.ravel()
        bias[c.mixtures * (1 + c.target_dim):] = UNIT_SIGMA_PREACT
        self.store.params["head.b"][...] = bias

    # -- raw forward / backward over batched windows ------------------------

    def _split_head(self, flat: np.ndarray) -> RawHeadOutputs:
        c = self.config
        k, me = c.mixtures, c.target_dim
        logits = flat[..., :k]
        means = flat[..., k: k + k * me].reshape(flat.shape[:-1] + (k, me))
        log_sd = flat[..., k + k * me:].reshape(flat.shape[:-1] + (k, me))
        return RawHeadOutputs(logits=logits, means=means, log_stddevs=log_sd)

    def _pack_head(self, raw: RawHeadOutputs) -> np.ndarray:
        lead = raw.logits.shape[:-1]
        return np.concatenate(
            [raw.logits, raw.means.reshape(lead + (-1,)), raw.log_stddevs.reshape(lead + (-1,))],
            axis=-1)

    def forward_raw(self, states: np.ndarray, goals: np.ndarray | None = None,
                    history_mask: np.ndarray | None = None, train_mode: bool = False,
                    rng: np.random.Generator | None = None) -> RawHeadOutputs:
        """Head pre-activations for every state position.

        states: (B, T, d) with 1 <= T <= state_history; goals: (B, G, d)
        with G == goal_horizon (required when the policy is conditional);
        history_mask: (B, T) bool, True = replace that position's state by
        the learned mask embedding before projection.
        """
        c = self.config
        states = np.asarray(states, dtype=self.store.dtype)
        if states.ndim != 3 or states.shape[2] != c.state_dim:
            raise ValueError(f"states must be (B, T, {c.state_dim}), got {states.shape}")
        if not 1 <= states.shape[1] <= c.state_history:
            raise ValueError(f"window length {states.shape[1]} not in [1, {c.state_history}]")
        n_goal = 0
        if c.goal_horizon > 0:
            if goals is None:
                raise ValueError("policy is goal-conditional; goals required")
            goals = np.asarray(goals, dtype=self.store.dtype)
            if goals.shape != (states.shape[0], c.goal_horizon, c.state_dim):
                raise ValueError(f"goals must be (B, {c.goal_horizon}, {c.state_dim})")
            n_goal = c.goal_horizon
        elif goals is not None and np.size(goals):
            raise ValueError("unconditional policy got goal tokens")

        mask = None
        if history_mask is not None:
            mask = np.asarray(history_mask, dtype=bool)
            if mask.shape != states.shape[:2]:
                raise ValueError("history_mask must be (B, T)")
            states = np.where(mask[..., None], self.mask_token.astype(self.store.dtype), states)

        x = states if n_goal == 0 else np.concatenate([goals, states], axis=1)
        tokens = self.in_proj.forward(x)
        type_row = np.concatenate(
            [np.ones(n_goal, dtype=int), np.zeros(states.shape[1], dtype=int)])
        tokens = tokens + self.type_emb[type_row]
        h = self.decoder.forward(tokens, train_mode=train_mode, rng=rng)
        flat = self.head.forward(h[:, n_goal:, :])
        self._cache = {"mask": mask, "n_goal": n_goal, "type_row": type_row,
                       "batch_len": (states.shape[0], states.shape[1])}
        return self._split_head(flat)

    def backward_raw(self, grad_raw: RawHeadOutputs) -> None:
        """Accumulate parameter gradients from head-output gradients."""
        if self._cache is None:
            raise RuntimeError("backward_raw before forward_raw")
        cache = self._cache
        g_flat = self._pack_head(grad_raw).astype(self.store.dtype)
        g_h_states = self.head.backward(g_flat)
        n_goal = cache["n_goal"]
        if n_goal:
            b, t = cache["batch_len"]
            g_h = np.zeros((b, n_goal + t, g_h_states.shape[-1]), dtype=self.store.dtype)
            g_h[:, n_goal:, :] = g_h_states
        else:
            g_h = g_h_states
        g_tokens = self.decoder.backward(g_h)
        type_grad = np.zeros_like(self.type_emb)
        summed = g_tokens.sum(axis=0)
        np.add.at(type_grad, cache["type_row"], summed)
        self.store.add_grad("type_emb", type_grad)
        g_x = self.in_proj.backward(g_tokens)
        if cache["mask"] is not None and cache["mask"].any():
            g_states = g_x[:, n_goal:, :]
            self.store.add_grad(
                "mask_token", g_states[cache["mask"]].sum(axis=0).astype(self.store.dtype))
        self._cache = None

    # -- public surfaces -----------------------------------------------------

    def forward(self, states: np.ndarray, goals: np.ndarray | None = None,
                history_mask: np.ndarray | None = None) -> list[GmmParams]:
        """Per-position conditional action distributions for one window."""
        states = np.asarray(states)
        raw = self.forward_raw(states[None], None if goals is None else np.asarray(goals)[None],
                               None if history_mask is None else np.asarray(history_mask)[None])
        return [
            raw_to_gmm(RawHeadOutputs(raw.logits[0, t], raw.means[0, t], raw.log_stddevs[0, t]))
            for t in range(states.shape[0])
        ]

    def nll_loss(self, states: np.ndarray, targets: np.ndarray,
                 goals: np.ndarray | None = None, history_mask: np.ndarray | None = None,
                 train_mode: bool = True, rng: np.random.Generator | None = None,
                 accumulate_grads: bool = True) -> float:
        """Mean per-position negative log-likelihood of target action chunks.

        The head math runs in double precision regardless of the parameter
        dtype; gradients (if requested) are accumulated into the store.
        """
        targets = np.asarray(targets, dtype=np.float64)
        raw = self.forward_raw(states, goals, history_mask, train_mode=train_mode, rng=rng)
        nll, grads = gmm_mod.nll_param_grads(raw, targets)
        loss = float(np.mean(nll))
        if accumulate_grads:
            scale = 1.0 / nll.size
            self.backward_raw(RawHeadOutputs(
                logits=grads.logits * scale,
                means=grads.means * scale,
                log_stddevs=grads.log_stddevs * scale))
        else:
            self._cache = None
        return loss

    def distribution_at(self, state_history: np.ndarray, goals: np.ndarray | None = None) -> GmmParams:
        """GmmParams at the most recent state position."""
        raw = self.forward_raw(np.asarray(state_history)[None],
                               None if goals is None else np.asarray(goals)[None])
        return raw_to_gmm(RawHeadOutputs(
            raw.logits[0, -1], raw.means[0, -1], raw.log_stddevs[0, -1]))

    def head_decode(self, hidden: np.ndarray) -> GmmParams:
        """Map one decoder output vector straight to its action mixture.

        This is the per-step inference head path (one matrix-vector product
        plus the softmax/softplus transforms), split out so its cost can be
        measured against the backbone forward pass.
        """
        c = self.config
        flat = (hidden @ self.head.w + self.head.b).astype(np.float64)
        k, me = c.mixtures, c.target_dim
        return raw_to_gmm(RawHeadOutputs(
            logits=flat[:k],
            means=flat[k: k + k * me].reshape(k, me),
            log_stddevs=flat[k + k * me:].reshape(k, me)))

    def act(self, state_history: np.ndarray, goals: np.ndarray | None,
            sampler: SamplerSpec, rng: np.random.Generator,
            mode_config: ModeFinderConfig | None = None) -> ActResult:
        """Sample one action chunk from the last position's mixture."""
        dist = self.distribution_at(state_history, goals)
        c = self.config
        mode_set = None
        degraded = False
        if sampler.kind == "vanilla":
            flat = gmm_mod.sample_vanilla(dist, rng, 1)[0]
        elif sampler.kind == "scaled":
            flat = gmm_mod.sample_vanilla(gmm_mod.scale_variances(dist, sampler.alpha), rng, 1)[0]
        else:
            mode_set = find_modes(dist, mode_config or ModeFinderConfig(), rng)
            degraded = mode_set.degraded
            flat = sample_mode(mode_set, rng, noise=sampler.mode_noise, scale=sampler.noise_scale)
        return ActResult(actions=flat.reshape(c.action_horizon, c.action_dim),
                         gmm=dist, mode_set=mode_set, degraded=degraded)
