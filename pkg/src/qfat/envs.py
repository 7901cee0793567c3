"""Synthetic multimodal control environments, demo generators, and metrics.

Both environments are 2-D point masses with displacement actions clamped to
a Euclidean norm of 0.05 per step.  The multiroute task offers two pairs of
equally likely paths from the origin to a target disc; the sequencing task
requires visiting two goal discs in either order, which makes the visit
order the behavioral "mode".  Demonstrations are generated by waypoint
trackers with optional additive Gaussian action noise, recorded exactly as
executed.

The rollout harness is episode-parallel: every episode derives its own
random stream from (seed, episode index), so results are bit-identical for
any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from .gmm import count_active_components
from .modes import ModeFinderConfig
from .policy import QfatPolicy, SamplerSpec
from .rng import substream
from .training import Normalizer, Trajectory


def clamp_action(action: np.ndarray, limit: float) -> np.ndarray:
    norm = float(np.linalg.norm(action))
    if norm > limit:
        return action * (limit / norm)
    return np.asarray(action, dtype=np.float64)


class MultirouteEnv:
    """Reach the target disc at (1, 1) from the origin; four demo routes."""

    name = "multiroute"
    state_dim = 2
    action_dim = 2
    action_limit = 0.05
    max_steps = 120
    target = np.array([1.0, 1.0])
    target_radius = 0.05
    # route pairs pass these corner waypoints
    pair_anchors = (np.array([1.0, 0.0]), np.array([0.0, 1.0]))

    def __init__(self, process_noise_std: float = 0.0):
        self.process_noise_std = process_noise_std
        self.pos = np.zeros(2)
        self.t = 0
        self.success = False

    def clone(self) -> "MultirouteEnv":
        return MultirouteEnv(self.process_noise_std)

    def reset(self) -> np.ndarray:
        self.pos = np.zeros(2)
        self.t = 0
        self.success = False
        return self.pos.copy()

    def step(self, action: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
        a = clamp_action(action, self.action_limit)
        noise = 0.0 if self.process_noise_std == 0.0 else \
            self.process_noise_std * rng.standard_normal(2)
        self.pos = self.pos + a + noise
        self.t += 1
        if np.linalg.norm(self.pos - self.target) <= self.target_radius:
            self.success = True
        return self.pos.copy(), self.success or self.t >= self.max_steps

    @classmethod
    def route_pair(cls, states: np.ndarray) -> int:
        """1 or 2: which corner anchor the trajectory came closest to."""
        d1 = np.min(np.linalg.norm(states - cls.pair_anchors[0], axis=-1))
        d2 = np.min(np.linalg.norm(states - cls.pair_anchors[1], axis=-1))
        return 1 if d1 <= d2 else 2

    def episode_symbol(self, states: np.ndarray) -> str:
        if not self.success:
            return "incomplete"
        return f"pair{self.route_pair(states)}"


class SequencingEnv:
    """Visit goal discs A = (-1, 1) and B = (1, 1) in either order."""

    name = "sequencing"
    state_dim = 2
    action_dim = 2
    action_limit = 0.05
    max_steps = 150
    goals = {"A": np.array([-1.0, 1.0]), "B": np.array([1.0, 1.0])}
    goal_radius = 0.15

    def __init__(self, process_noise_std: float = 0.0):
        self.process_noise_std = process_noise_std
        self.pos = np.zeros(2)
        self.t = 0
        self.visited: list[str] = []

    def clone(self) -> "SequencingEnv":
        return SequencingEnv(self.process_noise_std)

    def reset(self) -> np.ndarray:
        self.pos = np.zeros(2)
        self.t = 0
        self.visited = []
        return self.pos.copy()

    @property
    def success(self) -> bool:
        return len(self.visited) == 2

    def step(self, action: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
        a = clamp_action(action, self.action_limit)
        noise = 0.0 if self.process_noise_std == 0.0 else \
            self.process_noise_std * rng.standard_normal(2)
        self.pos = self.pos + a + noise
        self.t += 1
        for label, center in self.goals.items():
            if label not in self.visited and np.linalg.norm(self.pos - center) <= self.goal_radius:
                self.visited.append(label)
        return self.pos.copy(), self.success or self.t >= self.max_steps

    @classmethod
    def ordering_of(cls, states: np.ndarray) -> str:
        """First-entry visit order implied by a sequence of positions."""
        visited: list[str] = []
        for pos in states:
            for label, center in cls.goals.items():
                if label not in visited and np.linalg.norm(pos - center) <= cls.goal_radius:
                    visited.append(label)
        return "".join(visited)

    @classmethod
    def ordering_of_trajectory(cls, traj: Trajectory) -> str:
        """Visit order of a recorded demo, including the arrival position.

        Demos end on the step that enters the final goal, so the arrival
        position (last state + last action) is appended before classifying.
        """
        final = traj.states[-1] + traj.actions[-1]
        return cls.ordering_of(np.vstack([traj.states, final]))

    def episode_symbol(self, states: np.ndarray) -> str:
        order = "".join(self.visited)
        if self.success:
            return order
        return f"incomplete:{order}"


def make_env(name: str, process_noise_std: float = 0.0):
    if name == "multiroute":
        return MultirouteEnv(process_noise_std)
    if name == "sequencing":
        return SequencingEnv(process_noise_std)
    raise ValueError(f"unknown environment {name!r}")


# -- demonstration generators --------------------------------------------------


def _track_waypoints(env, waypoints: list[np.ndarray], switch_radius: float,
                     noise_std: float, rng: np.random.Generator,
                     speed: float | None = None) -> Trajectory:
    """Greedy waypoint tracking; noisy actions are recorded as executed.

    `speed` caps the tracking step below the env action limit; leaving
    headroom keeps the clamp from binding on noisy steps, so the recorded
    action distribution stays a clean Gaussian around the tracking
    direction rather than piling up on the clamp boundary.
    """
    states = []
    actions = []
    pos = env.reset()
    wp_idx = 0
    done = False
    while not done:
        target = waypoints[min(wp_idx, len(waypoints) - 1)]
        a = clamp_action(target - pos, speed or env.action_limit)
        if noise_std > 0.0:
            a = clamp_action(a + noise_std * rng.standard_normal(2), env.action_limit)
        states.append(pos.copy())
        actions.append(a)
        pos, done = env.step(a, rng)
        if wp_idx < len(waypoints) - 1 and np.linalg.norm(pos - target) <= switch_radius:
            wp_idx += 1
    return Trajectory(np.array(states), np.array(actions))


MULTIROUTE_WAYPOINTS = [
    [np.array([1.0, 0.08]), np.array([1.0, 1.0])],
    [np.array([1.0, -0.08]), np.array([1.0, 1.0])],
    [np.array([0.08, 1.0]), np.array([1.0, 1.0])],
    [np.array([-0.08, 1.0]), np.array([1.0, 1.0])],
]


def generate_multiroute_demos(n: int, noise_std: float,
                              rng: np.random.Generator) -> list[Trajectory]:
    """n waypoint-tracking demos over the four routes, chosen uniformly."""
    if n < 4:
        raise ValueError("need at least 4 demos to cover the route family")
    env = MultirouteEnv()
    demos = []
    for _ in range(n):
        route = int(rng.integers(len(MULTIROUTE_WAYPOINTS)))
        demos.append(_track_waypoints(env, MULTIROUTE_WAYPOINTS[route],
                                      switch_radius=0.06, noise_std=noise_std, rng=rng))
    return demos


def generate_sequencing_demos(n: int, noise_std: float,
                              rng: np.random.Generator) -> list[Trajectory]:
    """Half A-first, half B-first goal-seeking demos (order drawn per demo)."""
    env = SequencingEnv()
    demos = []
    for _ in range(n):
        order = "AB" if rng.integers(2) == 0 else "BA"
        waypoints = [env.goals[order[0]], env.goals[order[1]]]
        demos.append(_track_waypoints(env, waypoints, switch_radius=env.goal_radius,
                                      noise_std=noise_std, rng=rng, speed=0.035))
    return demos


def generate_demos(env_name: str, n: int, noise_std: float,
                   rng: np.random.Generator) -> list[Trajectory]:
    if env_name == "multiroute":
        return generate_multiroute_demos(n, noise_std, rng)
    if env_name == "sequencing":
        return generate_sequencing_demos(n, noise_std, rng)
    raise ValueError(f"unknown environment {env_name!r}")


# -- metrics and rollouts -------------------------------------------------------


def behavioral_entropy(symbols: list[str]) -> float:
    """Shannon entropy (bits) of the empirical ordering distribution."""
    if not symbols:
        return 0.0
    _, counts = np.unique(np.array(symbols, dtype=object), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum() + 0.0)  # + 0.0 normalizes -0.0


def squared_jitter(actions: np.ndarray) -> float:
    """Mean squared consecutive-action difference within one episode."""
    if actions.shape[0] < 2:
        return 0.0
    d = np.diff(actions, axis=0)
    return float(np.mean(np.sum(d * d, axis=-1)))


@dataclass
class EpisodeRecord:
    states: np.ndarray          # (steps + 1, 2) including the start position
    actions: np.ndarray         # (steps, 2) in environment units
    success: bool
    symbol: str
    active_counts: list[int]
    route_pair: int | None = None
    ref_symbol: str | None = None
    degraded: bool = False

    @property
    def jitter(self) -> float:
        return squared_jitter(self.actions)


@dataclass
class RolloutReport:
    env: str
    sampler: SamplerSpec
    seed: int
    episodes: list[EpisodeRecord]
    success_rate: float
    behavioral_entropy_bits: float
    mean_jitter: float
    active_mixture_histogram: dict[int, int]
    goal_adherence: float | None = None

    @property
    def unimodal_fraction(self) -> float:
        total = sum(self.active_mixture_histogram.values())
        if total == 0:
            return 0.0
        return self.active_mixture_histogram.get(1, 0) / total

    def jitters(self) -> np.ndarray:
        return np.array([ep.jitter for ep in self.episodes])

    def to_dict(self, include_trajectories: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "env": self.env,
            "sampler": self.sampler.to_dict(),
            "seed": self.seed,
            "episodes": len(self.episodes),
            "success_rate": self.success_rate,
            "behavioral_entropy_bits": self.behavioral_entropy_bits,
            "mean_jitter": self.mean_jitter,
            "active_mixture_histogram": {str(k): v for k, v in
                                         sorted(self.active_mixture_histogram.items())},
            "unimodal_fraction": self.unimodal_fraction,
        }
        if self.goal_adherence is not None:
            out["goal_adherence"] = self.goal_adherence
        if include_trajectories:
            out["trajectories"] = [
                {
                    "states": np.round(ep.states, 9).tolist(),
                    "actions": np.round(ep.actions, 9).tolist(),
                    "success": ep.success,
                    "symbol": ep.symbol,
                    "route_pair": ep.route_pair,
                    "ref_symbol": ep.ref_symbol,
                }
                for ep in self.episodes
            ]
        return out


def rollout(policy: QfatPolicy, env, sampler: SamplerSpec, episodes: int, seed: int,
            normalizer: Normalizer, goal_bank: list[Trajectory] | None = None,
            threads: int = 1, active_threshold: float = 0.1,
            mode_config: ModeFinderConfig | None = None) -> RolloutReport:
    """Run seeded episodes and aggregate the evaluation metrics.

    Conditional policies draw one reference trajectory per episode from
    goal_bank and keep its opening states as the goal window for the whole
    episode.  Per-episode streams derive from (seed, episode index), so any
    thread count produces identical results.
    """
    cfg = policy.config
    if env.state_dim != cfg.state_dim or env.action_dim != cfg.action_dim:
        raise ValueError("policy and environment dimensions do not match")
    if cfg.goal_horizon > 0:
        if not goal_bank:
            raise ValueError("goal-conditional rollout requires a goal bank")
        usable = [t for t in goal_bank if len(t) >= cfg.goal_horizon]
        if not usable:
            raise ValueError("no goal-bank trajectory is long enough for the goal window")
        goal_bank = usable

    def run_episode(ep: int) -> EpisodeRecord:
        rng = substream(seed, "rollout", ep)
        e = env.clone()
        obs = e.reset()
        history = [obs]
        ref = None
        ref_symbol = None
        if cfg.goal_horizon > 0:
            # the reference trajectory is fixed for the whole episode; the
            # goal window slides along it with the current step, matching
            # how training pairs each context with its immediate future
            ref = goal_bank[int(rng.integers(len(goal_bank)))]
            if hasattr(e, "ordering_of_trajectory"):
                ref_symbol = e.ordering_of_trajectory(ref)
        states = [obs.copy()]
        actions = []
        actives: list[int] = []
        degraded = False
        chunk: np.ndarray | None = None
        chunk_used = 0
        done = False
        step_idx = 0
        while not done:
            if chunk is None or chunk_used >= len(chunk):
                ctx = normalizer.normalize_states(np.array(history[-cfg.state_history:]))
                goals_norm = None
                if ref is not None:
                    start = min(step_idx + 1, len(ref) - cfg.goal_horizon)
                    goals_norm = normalizer.normalize_states(
                        ref.states[start: start + cfg.goal_horizon])
                res = policy.act(ctx, goals_norm, sampler, rng, mode_config)
                chunk = normalizer.denormalize_actions(
                    res.actions.reshape(-1, cfg.action_dim))
                chunk_used = 0
                actives.append(count_active_components(res.gmm, active_threshold))
                degraded = degraded or res.degraded
            action = chunk[chunk_used]
            chunk_used += 1
            obs, done = e.step(action, rng)
            history.append(obs)
            states.append(obs.copy())
            actions.append(np.asarray(action, dtype=np.float64))
            step_idx += 1
        states_arr = np.array(states)
        record = EpisodeRecord(
            states=states_arr,
            actions=np.array(actions),
            success=e.success,
            symbol=e.episode_symbol(states_arr),
            active_counts=actives,
            ref_symbol=ref_symbol,
            degraded=degraded,
        )
        if isinstance(e, MultirouteEnv):
            record.route_pair = MultirouteEnv.route_pair(states_arr)
        return record

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_episode, range(episodes)))
    else:
        records = [run_episode(ep) for ep in range(episodes)]

    histogram: dict[int, int] = {}
    for rec in records:
        for a in rec.active_counts:
            histogram[a] = histogram.get(a, 0) + 1
    adherence = None
    if cfg.goal_horizon > 0:
        successful = [r for r in records if r.success and r.ref_symbol is not None]
        if successful:
            adherence = float(np.mean([r.symbol == r.ref_symbol for r in successful]))
        else:
            adherence = 0.0
    return RolloutReport(
        env=env.name,
        sampler=sampler,
        seed=seed,
        episodes=records,
        success_rate=float(np.mean([r.success for r in records])),
        behavioral_entropy_bits=behavioral_entropy([r.symbol for r in records]),
        mean_jitter=float(np.mean([r.jitter for r in records])),
        active_mixture_histogram=histogram,
        goal_adherence=adherence,
    )
