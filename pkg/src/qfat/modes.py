"""Mode extraction for diagonal Gaussian mixtures via mean-shift.

A mode is a local maximum of the mixture density: a fixed point of the
mean-shift operator whose density Hessian is negative definite.  Extracted
modes are weighted by a local Gaussian-volume (Laplace) approximation,

    w_j ∝ p(m_j) * |det(-hess log p(m_j))|^(-1/2),

normalized into a multinomial over modes that respects the shape of the
density.  All seed iterations are independent and vectorized; candidate
points are sorted by coordinates before merging so that results do not
depend on evaluation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .gmm import GmmParams, evaluate, log_weights, logsumexp


@dataclass(frozen=True)
class ModeFinderConfig:
    """Tolerances for fixed-point mode search.

    n_init counts extra seeds beyond the component means; None means 4*k.
    reject_threshold drops modes whose normalized weight falls below it.
    """

    epsilon: float = 1e-6
    max_it: int = 200
    n_init: int | None = None
    merge_radius: float = 1e-3
    eig_tol: float = 1e-9
    reject_threshold: float = 1e-4

    def __post_init__(self):
        if self.epsilon <= 0 or self.merge_radius <= 0 or self.eig_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_it < 1:
            raise ValueError("max_it must be >= 1")
        if self.n_init is not None and self.n_init < 0:
            raise ValueError("n_init must be >= 0")


@dataclass(frozen=True)
class ModeSet:
    """Extracted modes with Laplace-normalized selection weights."""

    modes: np.ndarray          # (J, m)
    weights: np.ndarray        # (J,), sums to 1
    log_densities: np.ndarray  # (J,)
    hessians_logp: np.ndarray  # (J, m, m), negative definite unless degraded
    degraded: bool = False

    def __post_init__(self):
        if self.modes.ndim != 2 or self.weights.shape != (self.modes.shape[0],):
            raise ValueError("inconsistent ModeSet shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mode weights must sum to 1")

    @property
    def count(self) -> int:
        return self.modes.shape[0]


def _mean_shift_batch(gmm: GmmParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized fixed-point update for points x of shape (S, m).

    Returns (updated points, underflow mask).  Rows whose responsibilities
    all underflow are replaced by the nearest component mean.
    """
    lw = log_weights(gmm, x)                      # (S, k)
    top = np.max(lw, axis=-1, keepdims=True)
    underflow = ~np.isfinite(top[:, 0])
    c = np.exp(lw - np.where(np.isfinite(top), top, 0.0))   # scaled responsibilities
    inv_var = 1.0 / (gmm.stddevs * gmm.stddevs)             # (k, m)
    denom = c @ inv_var
    numer = c @ (gmm.means * inv_var)
    out = numer / denom
    if np.any(underflow):
        d = np.linalg.norm(x[underflow, None, :] - gmm.means, axis=-1)
        out[underflow] = gmm.means[np.argmin(d, axis=-1)]
    return out, underflow


def mean_shift_step(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    """One mean-shift update: per-coordinate average of component means
    weighted by pi_i N_i(x) / sigma_{i,j}^2.

    Far outside the support, where every responsibility underflows, the
    nearest component mean is returned and a RuntimeWarning is issued.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gmm.m,):
        raise ValueError(f"x must have shape ({gmm.m},), got {x.shape}")
    out, underflow = _mean_shift_batch(gmm, x[None, :])
    if underflow[0]:
        warnings.warn("mean-shift underflow region; snapped to nearest component mean",
                      RuntimeWarning, stacklevel=2)
    return out[0]


def seed_points(gmm: GmmParams, cfg: ModeFinderConfig, rng: np.random.Generator) -> np.ndarray:
    """Component means plus n_init convex combinations of them.

    Extra seeds are Dirichlet(1,...,1)-weighted mixtures of the means, i.e.
    uniform draws from the simplex spanned by the component centroids.
    """
    n_init = 4 * gmm.k if cfg.n_init is None else cfg.n_init
    if n_init == 0:
        return gmm.means.copy()
    lam = rng.dirichlet(np.ones(gmm.k), size=n_init)  # (n_init, k)
    return np.concatenate([gmm.means, lam @ gmm.means], axis=0)


def find_modes(gmm: GmmParams, cfg: ModeFinderConfig, rng: np.random.Generator) -> ModeSet:
    """Run mean-shift from all seed points and assemble the mode set."""
    return find_modes_from_seeds(gmm, cfg, seed_points(gmm, cfg, rng))


def find_modes_from_seeds(gmm: GmmParams, cfg: ModeFinderConfig, seeds: np.ndarray) -> ModeSet:
    """Mode extraction from an explicit seed set (deterministic).

    Each seed is iterated to a fixed point; points that fail to converge
    within max_it, or whose density Hessian is not negative definite, are
    dropped.  Survivors within merge_radius of each other are merged
    (single linkage, keeping the highest-density member), Laplace-weighted,
    and modes below reject_threshold are discarded.
    """
    x = np.array(seeds, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != gmm.m:
        raise ValueError("seeds must have shape (S, m)")

    active = np.ones(x.shape[0], dtype=bool)
    converged = np.zeros(x.shape[0], dtype=bool)
    for _ in range(cfg.max_it):
        new_x, _ = _mean_shift_batch(gmm, x[active])
        delta = np.linalg.norm(new_x - x[active], axis=-1)
        x[active] = new_x
        done = delta < cfg.epsilon
        idx = np.flatnonzero(active)
        converged[idx[done]] = True
        active[idx[done]] = False
        if not active.any():
            break

    candidates = x[converged]
    # Deterministic merge order regardless of seed order or parallel execution.
    if candidates.shape[0] > 0:
        candidates = candidates[np.lexsort(candidates.T[::-1])]

    verified: list[tuple[np.ndarray, float, np.ndarray]] = []
    for point in candidates:
        ev = evaluate(gmm, point)
        if ev.underflow:
            continue
        if np.max(np.linalg.eigvalsh(ev.hess_p)) < -cfg.eig_tol:
            verified.append((point, ev.log_density, ev.hess_logp))

    if not verified:
        return _degraded_mode_set(gmm)

    merged = _merge_single_linkage(verified, cfg.merge_radius)

    # Laplace weights in log space: log p - 0.5 log det(-H).
    kept: list[tuple[np.ndarray, float, np.ndarray]] = []
    log_w = []
    for point, logp, hess in merged:
        try:
            chol = np.linalg.cholesky(-hess)
        except np.linalg.LinAlgError:
            continue
        log_w.append(logp - np.sum(np.log(np.diag(chol))))
        kept.append((point, logp, hess))
    if not kept:
        return _degraded_mode_set(gmm)

    log_w = np.array(log_w)
    weights = np.exp(log_w - logsumexp(log_w, axis=-1))
    keep = weights >= cfg.reject_threshold
    if not keep.any():
        keep[np.argmax(weights)] = True
    weights = weights[keep] / weights[keep].sum()
    kept = [kv for kv, flag in zip(kept, keep) if flag]

    return ModeSet(
        modes=np.array([p for p, _, _ in kept]),
        weights=weights,
        log_densities=np.array([lp for _, lp, _ in kept]),
        hessians_logp=np.array([h for _, _, h in kept]),
    )


def _merge_single_linkage(
    items: list[tuple[np.ndarray, float, np.ndarray]], radius: float
) -> list[tuple[np.ndarray, float, np.ndarray]]:
    """Cluster points whose pairwise chain distance is <= radius; keep the
    highest-density member of each cluster."""
    pts = np.array([p for p, _, _ in items])
    n = pts.shape[0]
    adj = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1) <= radius
    label = np.full(n, -1, dtype=int)
    n_clusters = 0
    for i in range(n):
        if label[i] >= 0:
            continue
        stack = [i]
        label[i] = n_clusters
        while stack:
            j = stack.pop()
            for nb in np.flatnonzero(adj[j]):
                if label[nb] < 0:
                    label[nb] = n_clusters
                    stack.append(nb)
        n_clusters += 1
    out = []
    for c in range(n_clusters):
        members = [items[i] for i in np.flatnonzero(label == c)]
        out.append(max(members, key=lambda it: it[1]))
    return out


def _degraded_mode_set(gmm: GmmParams) -> ModeSet:
    """Fallback when no verified mode exists: the heaviest component mean."""
    i = int(np.argmax(gmm.weights))
    ev = evaluate(gmm, gmm.means[i])
    return ModeSet(
        modes=gmm.means[i][None, :].copy(),
        weights=np.array([1.0]),
        log_densities=np.array([ev.log_density]),
        hessians_logp=ev.hess_logp[None, :, :],
        degraded=True,
    )


def sample_mode(
    modes: ModeSet,
    rng: np.random.Generator,
    noise: str = "none",
    scale: float = 1.0,
) -> np.ndarray:
    """Draw one point from the mode multinomial, optionally perturbed.

    noise="none" returns the selected mode exactly; "fixed" adds isotropic
    N(0, scale^2 I); "laplace" adds N(0, scale * (-hess log p)^(-1)), the
    local curvature covariance at the mode scaled by a temperature.
    """
    if noise not in ("none", "fixed", "laplace"):
        raise ValueError(f"unknown noise kind {noise!r}")
    j = int(rng.choice(modes.count, p=modes.weights))
    point = modes.modes[j].copy()
    if noise == "none":
        return point
    m = point.shape[0]
    if noise == "fixed":
        return point + scale * rng.standard_normal(m)

    from .gmm import SIGMA_FLOOR

    neg_h = -modes.hessians_logp[j]
    ok = True
    try:
        eigs = np.linalg.eigvalsh(neg_h)
        if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > 1e12:
            ok = False
        else:
            chol = np.linalg.cholesky(neg_h)
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        warnings.warn("mode Hessian ill-conditioned; falling back to fixed noise",
                      RuntimeWarning, stacklevel=2)
        return point + SIGMA_FLOOR * rng.standard_normal(m)
    z = rng.standard_normal(m)
    # cov = (L L^T)^(-1)  =>  eps = sqrt(scale) * L^(-T) z has that covariance.
    return point + np.sqrt(scale) * solve_triangular(chol.T, z, lower=False)
