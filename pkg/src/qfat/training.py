"""Dataset preparation, the optimization loop, and checkpoint management.

Raw trajectories are split by trajectory (95/5) before any statistics are
computed, min-max normalized to [-1, 1] using training-split extremes only,
and cut into fixed-length context windows that never cross trajectory
boundaries.  Goal-conditional preparation attaches the window's immediate
future states as the goal tokens.  Each training window carries a history
mask drawn once: with probability history_mask_prob every context position
except the current state is masked.

The optimizer is Adam with cosine learning-rate decay; when min_lr is None
the rate is held constant at max_lr (flagged in the log).  Validation runs
with dropout off and no masking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .backbone import load_checkpoint, save_checkpoint
from .gmm import RawHeadOutputs, logsumexp, nll_param_grads
from .policy import PolicyConfig, QfatPolicy


class TrainingDivergence(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class Trajectory:
    states: np.ndarray   # (n, d)
    actions: np.ndarray  # (n, m)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-D")
        if self.states.shape[0] != self.actions.shape[0]:
            raise ValueError("states and actions must have equal length")

    def __len__(self) -> int:
        return self.states.shape[0]


def write_trajectories(trajectories: list[Trajectory], path: str | Path,
                       meta: dict[str, Any] | None = None) -> None:
    """JSON-lines, one trajectory per line; run metadata rides on the first line."""
    with open(path, "w") as fh:
        for i, traj in enumerate(trajectories):
            obj: dict[str, Any] = {
                "states": traj.states.tolist(),
                "actions": traj.actions.tolist(),
            }
            if i == 0 and meta is not None:
                obj["meta"] = meta
            fh.write(json.dumps(obj) + "\n")


def read_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(Trajectory(np.array(obj["states"]), np.array(obj["actions"])))
    return out


@dataclass
class Normalizer:
    """Per-dimension min-max scaling to [-1, 1] with degenerate-range guard."""

    state_center: np.ndarray
    state_scale: np.ndarray
    action_center: np.ndarray
    action_scale: np.ndarray

    @classmethod
    def fit(cls, trajectories: list[Trajectory]) -> "Normalizer":
        states = np.concatenate([t.states for t in trajectories], axis=0)
        actions = np.concatenate([t.actions for t in trajectories], axis=0)

        def center_scale(x):
            lo, hi = x.min(axis=0), x.max(axis=0)
            center = 0.5 * (lo + hi)
            scale = 0.5 * (hi - lo)
            scale = np.where(scale == 0.0, 1.0, scale)  # constant dims map to 0
            return center, scale

        sc, ss = center_scale(states)
        ac, asc = center_scale(actions)
        return cls(sc, ss, ac, asc)

    def normalize_states(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.state_center) / self.state_scale

    def denormalize_states(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.state_scale + self.state_center

    def normalize_actions(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.action_center) / self.action_scale

    def denormalize_actions(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.action_scale + self.action_center

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k).tolist() for k in
                ("state_center", "state_scale", "action_center", "action_scale")}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Normalizer":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    max_lr: float = 1e-3
    min_lr: float | None = 1e-6
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    history_mask_prob: float = 0.0
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size, eval_every must be >= 1")
        if not 0.0 <= self.history_mask_prob <= 1.0:
            raise ValueError("history_mask_prob must be in [0, 1]")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in (
            "epochs", "batch_size", "max_lr", "min_lr", "schedule", "beta1", "beta2",
            "weight_decay", "history_mask_prob", "eval_every", "seed")}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        return cls(**d)


@dataclass
class WindowSet:
    states: np.ndarray                 # (N, T, d) normalized
    targets: np.ndarray                # (N, T, horizon*m) normalized
    goals: np.ndarray | None           # (N, G, d) normalized or None
    history_mask: np.ndarray | None    # (N, T) bool or None

    @property
    def count(self) -> int:
        return self.states.shape[0]


@dataclass
class Prepared:
    train: WindowSet
    val: WindowSet
    normalizer: Normalizer
    skipped: int
    n_train_trajectories: int
    n_val_trajectories: int


def split_by_trajectory(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """95/5 split over trajectory indices (never over windows)."""
    perm = rng.permutation(n)
    n_val = max(1, int(round(0.05 * n))) if n >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _windows(trajs: list[Trajectory], normalizer: Normalizer, cfg: PolicyConfig,
             mask_prob: float, rng: np.random.Generator | None) -> tuple[WindowSet, int]:
    t_len, horizon, g_len = cfg.state_history, cfg.action_horizon, cfg.goal_horizon
    s_parts, a_parts, g_parts, m_parts = [], [], [], []
    skipped = 0
    for traj in trajs:
        n = len(traj)
        limit = n - t_len - horizon + 1
        if g_len > 0:
            limit = min(limit, n - t_len - g_len)
        if limit < 0:
            skipped += 1
            continue
        states = normalizer.normalize_states(traj.states)
        actions = normalizer.normalize_actions(traj.actions)
        n_w = limit + 1
        pos = np.arange(n_w)[:, None] + np.arange(t_len)[None, :]       # (n_w, T)
        s_parts.append(states[pos])
        chunk = pos[:, :, None] + np.arange(horizon)[None, None, :]     # (n_w, T, H)
        a_parts.append(actions[chunk].reshape(n_w, t_len, horizon * cfg.action_dim))
        if g_len > 0:
            gpos = (np.arange(n_w) + t_len)[:, None] + np.arange(g_len)[None, :]
            g_parts.append(states[gpos])
        if rng is not None and mask_prob > 0.0:
            masked = rng.random(n_w) < mask_prob
            m = np.zeros((n_w, t_len), dtype=bool)
            m[masked, : t_len - 1] = True   # everything except the current state
            m_parts.append(m)
    if not s_parts:
        raise ValueError("no trajectory is long enough for the configured windows")
    ws = WindowSet(
        states=np.concatenate(s_parts).astype(np.float32),
        targets=np.concatenate(a_parts).astype(np.float32),
        goals=np.concatenate(g_parts).astype(np.float32) if g_parts else None,
        history_mask=np.concatenate(m_parts) if m_parts else None,
    )
    return ws, skipped


def prepare(trajectories: list[Trajectory], policy_cfg: PolicyConfig,
            train_cfg: TrainConfig, rng: np.random.Generator) -> Prepared:
    """Split, fit normalization on the training split, and window both splits."""
    train_idx, val_idx = split_by_trajectory(len(trajectories), rng)
    train_trajs = [trajectories[i] for i in train_idx]
    val_trajs = [trajectories[i] for i in val_idx]
    normalizer = Normalizer.fit(train_trajs)
    train_ws, skipped_t = _windows(train_trajs, normalizer, policy_cfg,
                                   train_cfg.history_mask_prob, rng)
    if val_trajs:
        val_ws, skipped_v = _windows(val_trajs, normalizer, policy_cfg, 0.0, None)
    else:
        # degenerate corpus (single trajectory): validate on the training windows
        val_ws, skipped_v = WindowSet(train_ws.states, train_ws.targets,
                                      train_ws.goals, None), 0
    return Prepared(train=train_ws, val=val_ws, normalizer=normalizer,
                    skipped=skipped_t + skipped_v,
                    n_train_trajectories=len(train_trajs),
                    n_val_trajectories=len(val_trajs))


def cosine_lr(step: int, total_steps: int, max_lr: float, min_lr: float | None) -> float:
    """Cosine decay hitting max_lr at step 0 and min_lr at the final step."""
    if min_lr is None or total_steps <= 1:
        return max_lr
    frac = step / (total_steps - 1)
    return float(min_lr + 0.5 * (max_lr - min_lr) * (1.0 + np.cos(np.pi * frac)))


class Adam:
    def __init__(self, store, beta1: float = 0.9, beta2: float = 0.95,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.store.params.items():
            g = self.store.grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float | None] = field(default_factory=list)
    mean_active_mixtures: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = np.inf
    best_params: dict[str, np.ndarray] | None = None
    constant_lr: bool = False

    def eval_points(self) -> list[tuple[int, float, float]]:
        """(epoch, val_nll, mean_active) rows where validation actually ran."""
        return [(e, v, a) for e, v, a in
                zip(self.epochs, self.val_nll, self.mean_active_mixtures) if v is not None]


def validation_metrics(policy: QfatPolicy, windows: WindowSet,
                       active_threshold: float = 0.1, chunk: int = 1024) -> tuple[float, float]:
    """(mean NLL, mean active-mixture count) with dropout off and no masking."""
    total_nll = 0.0
    total_active = 0.0
    count = 0
    for start in range(0, windows.count, chunk):
        sl = slice(start, min(start + chunk, windows.count))
        states = windows.states[sl]
        goals = None if windows.goals is None else windows.goals[sl]
        raw = policy.forward_raw(states, goals, train_mode=False)
        policy._cache = None
        nll, _ = nll_param_grads(raw, windows.targets[sl].astype(np.float64))
        logits = raw.logits.astype(np.float64)
        weights = np.exp(logits - logsumexp(logits, axis=-1)[..., None])
        total_nll += float(nll.sum())
        total_active += float((weights >= active_threshold).sum())
        count += nll.size
    return total_nll / count, total_active / count


def train(policy: QfatPolicy, prepared: Prepared, cfg: TrainConfig) -> TrainLog:
    """Optimize the policy in place; returns the epoch log with best params."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261696E]))
    ws = prepared.train
    n = ws.count
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    adam = Adam(policy.store, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
    log = TrainLog(constant_lr=(cfg.min_lr is None or cfg.schedule == "constant"))

    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_lr = cosine_lr(step, total_steps, cfg.max_lr,
                             None if log.constant_lr else cfg.min_lr)
        epoch_loss = 0.0
        for b in range(batches_per_epoch):
            idx = perm[b * cfg.batch_size: (b + 1) * cfg.batch_size]
            lr = cosine_lr(step, total_steps, cfg.max_lr,
                           None if log.constant_lr else cfg.min_lr)
            policy.store.zero_grads()
            loss = policy.nll_loss(
                ws.states[idx], ws.targets[idx],
                None if ws.goals is None else ws.goals[idx],
                None if ws.history_mask is None else ws.history_mask[idx],
                train_mode=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch, b)
            adam.step(lr)
            epoch_loss += loss * len(idx)
            step += 1

        log.epochs.append(epoch)
        log.train_nll.append(epoch_loss / n)
        log.lr.append(float(epoch_lr))
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            val_nll, mean_active = validation_metrics(policy, prepared.val)
            log.val_nll.append(val_nll)
            log.mean_active_mixtures.append(mean_active)
            if val_nll < log.best_val_nll:
                log.best_val_nll = val_nll
                log.best_epoch = epoch
                log.best_params = policy.store.copy_values()
        else:
            log.val_nll.append(None)
            log.mean_active_mixtures.append(None)
    if log.best_params is None:
        log.best_params = policy.store.copy_values()
        log.best_epoch = cfg.epochs - 1
    return log


def write_training_log(log: TrainLog, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    """CSV: epoch, train_nll, val_nll, mean_active_mixtures, lr.

    The resolved run configuration rides in a leading '#' comment line.
    """
    with open(path, "w") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta) + "\n")
        fh.write("epoch,train_nll,val_nll,mean_active_mixtures,lr\n")
        for i in range(len(log.epochs)):
            val = "" if log.val_nll[i] is None else f"{log.val_nll[i]:.9f}"
            act = "" if log.mean_active_mixtures[i] is None else f"{log.mean_active_mixtures[i]:.6f}"
            fh.write(f"{log.epochs[i]},{log.train_nll[i]:.9f},{val},{act},{log.lr[i]:.9e}\n")


# -- checkpoint management ----------------------------------------------------


def save_policy(policy: QfatPolicy, path: str | Path, normalizer: Normalizer,
                extra: dict[str, Any] | None = None) -> None:
    """Binary parameter checkpoint plus a JSON sidecar (config + normalization)."""
    path = Path(path)
    if path.suffix == ".json":
        raise ValueError("checkpoint path must not end in .json (sidecar would collide)")
    save_checkpoint(policy.store, str(path))
    sidecar = {
        "policy_config": policy.config.to_dict(),
        "normalizer": normalizer.to_dict(),
    }
    if extra:
        sidecar["extra"] = extra
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_policy(path: str | Path,
                expected_config: PolicyConfig | None = None) -> tuple[QfatPolicy, Normalizer, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    config = PolicyConfig.from_dict(sidecar["policy_config"])
    if expected_config is not None and config != expected_config:
        raise ValueError("checkpoint PolicyConfig does not match the expected configuration")
    store = load_checkpoint(str(path))
    policy = QfatPolicy(config, np.random.default_rng(0))
    if store.names() != policy.store.names():
        raise ValueError("checkpoint parameter names do not match the policy architecture")
    policy.store.load_values(store.params)
    normalizer = Normalizer.from_dict(sidecar["normalizer"])
    return policy, normalizer, sidecar.get("extra", {})


def checkpoint_roundtrip(policy: QfatPolicy, normalizer: Normalizer,
                         directory: str | Path) -> tuple[QfatPolicy, Normalizer]:
    """Save then reload; the result must be parameter-for-parameter identical."""
    path = Path(directory) / "roundtrip.qfat"
    save_policy(policy, path, normalizer)
    loaded, norm, _ = load_policy(path)
    return loaded, norm
