import numpy as np
import pytest

from qfat.gmm import GmmParams


def random_gmm(rng: np.random.Generator, k: int, m: int,
               mean_range: float = 2.0, sd_lo: float = 0.3, sd_hi: float = 1.5) -> GmmParams:
    return GmmParams(
        weights=rng.dirichlet(np.ones(k)),
        means=rng.uniform(-mean_range, mean_range, (k, m)),
        stddevs=rng.uniform(sd_lo, sd_hi, (k, m)),
    )


def sample_near_support(rng: np.random.Generator, gmm: GmmParams) -> np.ndarray:
    i = rng.choice(gmm.k, p=gmm.weights)
    return gmm.means[i] + gmm.stddevs[i] * rng.standard_normal(gmm.m)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
