"""Synthetic spatial data for tests, demos and the acceptance runs."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cholesky

from pymra.dataio import ObservationSet
from pymra.kernel import CovarianceParams, cross_covariance_matrix


def uniform_locations(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random((n, 2))


def sample_gp_dense(locations, params: CovarianceParams, rng: np.random.Generator) -> np.ndarray:
    """Exact draw of the exponential-kernel GP plus nugget (O(n^3), small n only)."""
    locations = np.asarray(locations, dtype=np.float64)
    C = cross_covariance_matrix(locations, locations, params)
    C[np.diag_indices_from(C)] += params.tau + 1e-10 * params.alpha
    L = cholesky(C, lower=True)
    return L @ rng.standard_normal(len(locations))


def sample_gp_rff(
    locations, params: CovarianceParams, rng: np.random.Generator, features: int = 2000
) -> np.ndarray:
    """Approximate draw via random Fourier features, then nugget noise.

    The exponential kernel alpha exp(-|h|/beta) has a bivariate Cauchy
    spectral density with scale 1/beta, so frequencies are Gaussian vectors
    divided by beta and by the root of a chi-square(1) variable.
    """
    locations = np.asarray(locations, dtype=np.float64)
    g = rng.standard_normal((features, 2)) / params.beta
    omega = g / np.sqrt(rng.chisquare(1.0, size=(features, 1)))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=features)
    weights = rng.standard_normal(features)
    f = np.zeros(len(locations))
    step = 20000
    for s in range(0, len(locations), step):
        block = locations[s : s + step]
        f[s : s + step] = np.cos(block @ omega.T + phase) @ weights
    f *= np.sqrt(2.0 * params.alpha / features)
    if params.tau:
        f += np.sqrt(params.tau) * rng.standard_normal(len(locations))
    return f


def synthetic_observations(
    n: int, params: CovarianceParams, seed: int = 0, method: str = "rff", features: int = 2000
) -> ObservationSet:
    """Uniform locations on the unit square with GP values."""
    rng = np.random.default_rng(seed)
    X = uniform_locations(n, rng)
    if method == "dense":
        y = sample_gp_dense(X, params, rng)
    elif method == "rff":
        y = sample_gp_rff(X, params, rng, features)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return ObservationSet(X[:, 0].copy(), X[:, 1].copy(), y)


def skewed_observations(
    J: int, M: int, base: int, ratio: float, params: CovarianceParams, seed: int = 0
) -> ObservationSet:
    """Points whose finest-region counts follow a geometric profile.

    The unit square is cut into the same J^(M-1) cells a tree over it would
    use; cell ``k`` in canonical order gets about ``base * ratio**k`` points,
    so the work is concentrated at the start of the canonical order.
    """
    from pymra.partition import BoundingBox, build_tree

    rng = np.random.default_rng(seed)
    # A probe tree over the unit square fixes the cell geometry; build the
    # analysis tree with the same ``domain`` to get the same cells.
    probe = np.array([[0.25, 0.25], [0.75, 0.75]])
    tree = build_tree(
        ObservationSet(probe[:, 0], probe[:, 1], np.zeros(len(probe))),
        J,
        4,
        M,
        domain=BoundingBox(0.0, 1.0, 0.0, 1.0),
    )
    pts = []
    for k in range(tree.n_finest):
        box = tree.boxes[tree.finest[k]]
        cnt = max(1, int(round(base * ratio**k)))
        xs = box[0] + (box[1] - box[0]) * rng.random(cnt)
        ys = box[2] + (box[3] - box[2]) * rng.random(cnt)
        pts.append(np.column_stack([xs, ys]))
    X = np.vstack(pts)
    y = sample_gp_rff(X, params, rng)
    return ObservationSet(X[:, 0].copy(), X[:, 1].copy(), y)
