import numpy as np
import pytest

from mgpa.model import ModelParams
from mgpa.spatial_codes import SpatialCodeSet
from mgpa.temporal_gp import TemporalSourceSet, TimeWarp
from mgpa.tensor_core import SeededRng

TINY_GRID = (2, 2, 2)  # F = 8


def random_params(seed, n_samples=5, grid=TINY_GRID, lambdas=(1.0,), n_rf=2, delta_scale=0.3):
    """A random, well-conditioned model state for gradient and bound checks."""
    rng = np.random.default_rng(seed)
    n, f = len(lambdas), int(np.prod(grid))
    ts = TemporalSourceSet(
        r=rng.normal(0, 1.5, (n, n_rf)),
        log_p2=rng.normal(-2, 0.3, (n, n_rf)),
        m=rng.normal(0, 0.7, (n, 2 * n_rf)),
        log_s2=rng.normal(-2, 0.3, (n, 2 * n_rf)),
        log_l=rng.normal(0, 0.3, n),
    )
    mu = rng.normal(0, 1, (n, f))
    sc = SpatialCodeSet(mu=mu, log_rho2=np.log(mu**2) + rng.normal(-1, 1, (n, f)))
    warp = TimeWarp(delta=rng.normal(0, delta_scale, n_samples), tau=np.linspace(0, 1, n_samples))
    return ModelParams(temporal=ts, codes=sc, warp=warp, z=rng.normal(0, 0.5, f),
                       log_sigma=np.log(0.8), grid=grid, lambdas=tuple(lambdas))


@pytest.fixture
def rng():
    return SeededRng(1234)
