import numpy as np
import pytest

from pymra.dataio import ObservationSet
from pymra.kernel import CovarianceParams
from pymra.partition import build_tree


def random_observations(rng, n, low=0.0, high=1.0):
    X = rng.uniform(low, high, size=(n, 2))
    y = rng.standard_normal(n)
    return ObservationSet(X[:, 0], X[:, 1], y)


def random_params(rng):
    return CovarianceParams(
        alpha=float(rng.uniform(0.5, 2.0)),
        beta=float(rng.uniform(0.05, 0.5)),
        tau=float(rng.uniform(0.01, 0.3)),
    )


def random_instance(rng, n, J, M, r):
    obs = random_observations(rng, n)
    return obs, build_tree(obs, J, r, M), random_params(rng)


def inside_queries(tree, rng, k):
    """Query points strictly inside the extended domain."""
    d = tree.domain
    x = rng.uniform(d.x_min, d.x_max, size=k)
    y = rng.uniform(d.y_min, d.y_max, size=k)
    return np.column_stack([x, y])


def textbook_gp(X, y, params):
    """A scikit-learn GP with the same exponential kernel and nugget."""
    from sklearn.gaussian_process import GaussianProcessRegressor
    from sklearn.gaussian_process.kernels import ConstantKernel, Matern

    kernel = ConstantKernel(params.alpha, constant_value_bounds="fixed") * Matern(
        length_scale=params.beta, length_scale_bounds="fixed", nu=0.5
    )
    gp = GaussianProcessRegressor(kernel=kernel, alpha=params.tau, optimizer=None, normalize_y=False)
    return gp.fit(X, y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
