"""Finite-difference checking harness.

Central-difference oracles for gradients and Hessians of scalar functions,
plus a coordinate-sampling checker for parameter stores.  Comparisons use a
norm-relative error with a unit floor, rel_error(a, b) =
||a - b|| / max(||b||, floor), which stays meaningful when the true
derivative is near zero.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def fd_hessian(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central second-difference Hessian of f at x (symmetric by construction)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    h = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros_like(x)
        ei.flat[i] = step
        h[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / step**2
        for j in range(i + 1, n):
            ej = np.zeros_like(x)
            ej.flat[j] = step
            hij = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                4.0 * step**2
            )
            h[i, j] = h[j, i] = hij
    return h


def rel_error(approx: np.ndarray, exact: np.ndarray, floor: float = 1.0) -> float:
    """||approx - exact|| / max(||exact||, floor)."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.linalg.norm(approx - exact) / max(np.linalg.norm(exact), floor))


def check_param_gradients(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    rng: np.random.Generator,
    names: Iterable[str] | None = None,
    coords_per_param: int = 4,
    step: float = 1e-5,
) -> dict[str, float]:
    """Spot-check analytic parameter gradients against central differences.

    `grads` must already hold the analytic gradients of `loss_fn` at the
    current parameter values.  For each named array a few random coordinates
    are perturbed in place (and restored).  Returns the worst relative error
    per parameter name, measured against max(|analytic|, 1) at array scale.
    """
    out: dict[str, float] = {}
    for name in names if names is not None else params.keys():
        p = params[name]
        g = grads[name]
        scale = max(float(np.max(np.abs(g))), 1.0)
        n_coords = min(coords_per_param, p.size)
        coords = rng.choice(p.size, size=n_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = p.flat[c]
            p.flat[c] = orig + step
            f_plus = loss_fn()
            p.flat[c] = orig - step
            f_minus = loss_fn()
            p.flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, abs(fd - g.flat[c]) / scale)
        out[name] = worst
    return out
