"""Exact, closed-form math for diagonal-covariance Gaussian mixtures.

Everything here is double precision and computed in log space: component
log-densities are combined with log-sum-exp, and linear-scale quantities
(density, its gradient and Hessian) are reconstructed by exponentiation.
That keeps variance-downscaled mixtures (stddevs near the floor) inside
double range.

Derivative identities used throughout, with responsibilities
r_i = pi_i N_i(x) / p(x) and u_i = (mu_i - x) / sigma_i^2:

    grad log p   = sum_i r_i u_i
    hess p / p   = sum_i r_i (u_i u_i^T - diag(1 / sigma_i^2))
    hess log p   = hess p / p - (grad log p)(grad log p)^T
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# Lower bound on every component standard deviation, in normalized action
# units.  Applied after every stddev computation (head activation, variance
# scaling); prevents degenerate likelihood spikes on noiseless demos.
SIGMA_FLOOR = 1e-4

_LOG_2PI = float(np.log(2.0 * np.pi))
# Below this log-density, exp() underflows to exactly 0.0 in double.
_LOG_TINY = float(np.log(np.finfo(np.float64).tiny))


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log(sum(exp(a))) along an axis; tolerates -inf entries."""
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):  # all -inf rows give log(0) = -inf
        out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


@dataclass(frozen=True)
class GmmParams:
    """One conditional action distribution: a k-component diagonal GMM.

    weights: (k,) probability vector; means, stddevs: (k, m).
    """

    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        sd = np.asarray(self.stddevs, dtype=np.float64)
        if w.ndim != 1 or mu.ndim != 2 or sd.shape != mu.shape:
            raise ValueError("expected weights (k,), means (k, m), stddevs (k, m)")
        k, m = mu.shape
        if k < 1 or m < 1 or w.shape[0] != k:
            raise ValueError(f"bad GMM shapes: k={k}, m={m}, weights={w.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
            raise ValueError("GMM parameters must be finite")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-12")
        if np.any(sd < SIGMA_FLOOR):
            raise ValueError(f"stddevs must be >= SIGMA_FLOOR ({SIGMA_FLOOR})")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stddevs", sd)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def m(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class GmmEval:
    """Density, log-density, and their first two derivatives at one point.

    `underflow` is set when the density is not representable in double
    (p == 0.0 after exponentiation); the log-space fields remain valid.
    """

    density: float
    log_density: float
    grad_p: np.ndarray
    hess_p: np.ndarray
    grad_logp: np.ndarray
    hess_logp: np.ndarray
    underflow: bool


def component_log_densities(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    """log N(x | mu_i, diag(sigma_i^2)) for each component.

    x may carry leading batch dimensions: (..., m) -> (..., k).
    """
    x = np.asarray(x, dtype=np.float64)
    z = (x[..., None, :] - gmm.means) / gmm.stddevs
    return -0.5 * np.sum(z * z + 2.0 * np.log(gmm.stddevs) + _LOG_2PI, axis=-1)


def log_weights(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    """log(pi_i N_i(x)), i.e. unnormalized log responsibilities: (..., k)."""
    with np.errstate(divide="ignore"):  # zero weights -> -inf, handled by LSE
        logpi = np.log(gmm.weights)
    return logpi + component_log_densities(gmm, x)


def log_density(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    """log p(x) for x of shape (..., m)."""
    return logsumexp(log_weights(gmm, x), axis=-1)


def responsibilities(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    """Posterior component probabilities r_i(x), computed in log space."""
    lw = log_weights(gmm, x)
    return np.exp(lw - logsumexp(lw, axis=-1)[..., None])


def evaluate(gmm: GmmParams, x: np.ndarray) -> GmmEval:
    """Density, gradient and Hessian of p and log p at a single point x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gmm.m,):
        raise ValueError(f"x must have shape ({gmm.m},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")

    lw = log_weights(gmm, x)                      # (k,)
    logp = logsumexp(lw, axis=-1)
    r = np.exp(lw - logp)                         # responsibilities, sum to 1
    inv_var = 1.0 / (gmm.stddevs * gmm.stddevs)   # (k, m)
    u = (gmm.means - x) * inv_var                 # (k, m)

    grad_logp = r @ u                             # (m,)
    # hess p / p = sum_i r_i (u_i u_i^T - diag(inv_var_i))
    hess_p_over_p = np.einsum("i,ij,il->jl", r, u, u) - np.diag(r @ inv_var)
    hess_logp = hess_p_over_p - np.outer(grad_logp, grad_logp)

    underflow = logp < _LOG_TINY
    p = float(np.exp(logp))
    return GmmEval(
        density=p,
        log_density=float(logp),
        grad_p=p * grad_logp,
        hess_p=p * hess_p_over_p,
        grad_logp=grad_logp,
        hess_logp=hess_logp,
        underflow=bool(underflow),
    )


def moments(gmm: GmmParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and full covariance of the mixture.

    mean = sum_i pi_i mu_i
    cov  = sum_i pi_i (diag(sigma_i^2) + (mu_i - mean)(mu_i - mean)^T)
    """
    mean = gmm.weights @ gmm.means
    dev = gmm.means - mean
    cov = np.einsum("i,ij,il->jl", gmm.weights, dev, dev)
    cov += np.diag(gmm.weights @ (gmm.stddevs * gmm.stddevs))
    return mean, cov


def sample_vanilla(gmm: GmmParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n samples: categorical component index, then that Gaussian."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = rng.choice(gmm.k, size=n, p=gmm.weights)
    eps = rng.standard_normal((n, gmm.m))
    return gmm.means[idx] + eps * gmm.stddevs[idx]


def scale_variances(gmm: GmmParams, alpha: float) -> GmmParams:
    """Replace each component variance sigma^2 by alpha * sigma^2.

    Weights and means are unchanged; scaled stddevs are floored at
    SIGMA_FLOOR.  alpha must lie in (0, 1].
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    scaled = np.maximum(np.sqrt(alpha) * gmm.stddevs, SIGMA_FLOOR)
    return GmmParams(weights=gmm.weights, means=gmm.means, stddevs=scaled)


def count_active_components(gmm: GmmParams, threshold: float) -> int:
    """Number of mixture weights at or above the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return int(np.count_nonzero(gmm.weights >= threshold))


@dataclass(frozen=True)
class RawHeadOutputs:
    """Pre-activation mixture parameters as emitted by a policy head.

    logits: (..., k) mixture logits; means: (..., k, m); log_stddevs:
    (..., k, m) stddev pre-activations mapped through softplus + floor.
    Leading batch dimensions are allowed and broadcast elementwise.
    """

    logits: np.ndarray
    means: np.ndarray
    log_stddevs: np.ndarray


def raw_to_gmm(raw: RawHeadOutputs) -> GmmParams:
    """Convert one position's raw head outputs to a valid GmmParams."""
    logits = np.asarray(raw.logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("raw_to_gmm expects unbatched head outputs")
    logw = logits - logsumexp(logits, axis=-1)
    sd = softplus(np.asarray(raw.log_stddevs, dtype=np.float64)) + SIGMA_FLOOR
    return GmmParams(weights=np.exp(logw), means=raw.means, stddevs=sd)


def nll_param_grads(raw: RawHeadOutputs, x: np.ndarray) -> tuple[np.ndarray, RawHeadOutputs]:
    """Negative log-likelihood of x and its exact head-parameter gradients.

    Returns (nll, grads) where grads has the same shapes as `raw`.  All
    responsibilities are computed in log space.  Supports leading batch
    dimensions on both raw outputs and x; nll then has those batch dims.
    """
    logits = np.asarray(raw.logits, dtype=np.float64)
    mu = np.asarray(raw.means, dtype=np.float64)
    s = np.asarray(raw.log_stddevs, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)

    sd = softplus(s) + SIGMA_FLOOR
    z = (x[..., None, :] - mu) / sd                                   # (..., k, m)
    log_norm = -0.5 * np.sum(z * z + 2.0 * np.log(sd) + _LOG_2PI, axis=-1)
    logpi = logits - logsumexp(logits, axis=-1)[..., None]
    lw = logpi + log_norm
    ll = logsumexp(lw, axis=-1)
    r = np.exp(lw - ll[..., None])                                    # (..., k)

    pi = np.exp(logpi)
    d_logits = pi - r
    d_means = -r[..., None] * z / sd
    d_sd = -r[..., None] * (z * z - 1.0) / sd
    d_log_stddevs = d_sd * expit(s)
    return -ll, RawHeadOutputs(logits=d_logits, means=d_means, log_stddevs=d_log_stddevs)
