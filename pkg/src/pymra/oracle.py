"""Dense brute-force MRA covariance, likelihood and kriging.

Every level-m covariance is evaluated by literally unrolling

    C_m(x, y) = C_{m-1}(x, y) - C_{m-1}(x, Q) C_{m-1}(Q, Q)^{-1} C_{m-1}(Q, y)

with ``Q`` the knots of the enclosing level-(m-1) region; nothing is cached
between calls. Cost grows like 4^M per region, which is the point: this is
the slow reference the fast path is tested against.
"""

from __future__ import annotations

import numpy as np

from pymra.errors import NumericalError, StructureError
from pymra.kernel import CovarianceParams, cross_covariance_matrix
from pymra.partition import PartitionTree

MAX_ORACLE_POINTS = 1000


def level_covariance(level: int, chain_knots, X, Y, params: CovarianceParams) -> np.ndarray:
    """C_level(X, Y) for X, Y inside one level-``level`` region.

    ``chain_knots[k]`` are the knots of the enclosing level-(k+1) region.
    """
    if level == 1:
        return cross_covariance_matrix(X, Y, params)
    Q = chain_knots[level - 2]
    xq = level_covariance(level - 1, chain_knots, X, Q, params)
    qq = level_covariance(level - 1, chain_knots, Q, Q, params)
    qy = level_covariance(level - 1, chain_knots, Q, Y, params)
    xy = level_covariance(level - 1, chain_knots, X, Y, params)
    return xy - xq @ np.linalg.solve(qq, qy)


def _joint_covariance(tree: PartitionTree, params: CovarianceParams, points: np.ndarray) -> np.ndarray:
    pos = tree.locate(points[:, 0], points[:, 1])
    if np.any(pos < 0):
        raise StructureError(f"{int(np.sum(pos < 0))} locations lie outside the level-1 domain")
    member = np.empty((len(points), tree.M), dtype=np.int64)
    for j, k in enumerate(pos):
        member[j] = tree.ancestors(int(tree.finest[k]))
    S = np.zeros((len(points), len(points)))
    for i in range(tree.n_regions):
        m = int(tree.level[i])
        ix = np.flatnonzero(member[:, m - 1] == i)
        if ix.size == 0:
            continue
        P = points[ix]
        chain_knots = [tree.knots[a] for a in tree.ancestors(i)[:-1]]
        if m < tree.M:
            Q = tree.knots[i]
            B = level_covariance(m, chain_knots, P, Q, params)
            KQ = level_covariance(m, chain_knots, Q, Q, params)
            S[np.ix_(ix, ix)] += B @ np.linalg.solve(KQ, B.T)
        else:
            S[np.ix_(ix, ix)] += level_covariance(m, chain_knots, P, P, params)
    return S


class DenseMRACovariance:
    """MRA prior covariance over observation locations, plus query helpers."""

    def __init__(self, tree: PartitionTree, params: CovarianceParams, locations):
        locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
        if len(locations) > MAX_ORACLE_POINTS:
            raise ValueError(f"oracle is limited to {MAX_ORACLE_POINTS} observations, got {len(locations)}")
        self.tree = tree
        self.params = params
        self.locations = locations
        self.sigma = _joint_covariance(tree, params, locations)

    def joint(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """(cross (n_obs, n_q), prior variances (n_q,)) for query locations."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        if len(queries) > 2 * MAX_ORACLE_POINTS:
            raise ValueError("too many oracle queries")
        n = len(self.locations)
        S = _joint_covariance(self.tree, self.params, np.vstack([self.locations, queries]))
        return S[:n, n:], np.diag(S[n:, n:]).copy()

    def cross(self, queries) -> np.ndarray:
        return self.joint(queries)[0]

    def prior_var(self, queries) -> np.ndarray:
        return self.joint(queries)[1]


def mra_covariance_dense(tree: PartitionTree, params: CovarianceParams, locations) -> DenseMRACovariance:
    return DenseMRACovariance(tree, params, locations)


def _noisy(sigma: np.ndarray, tau: float) -> np.ndarray:
    out = np.array(sigma, dtype=np.float64, copy=True)
    out[np.diag_indices_from(out)] += tau
    return out


def exact_loglik_dense(sigma: np.ndarray, tau: float, y) -> float:
    """Zero-mean Gaussian log-density of ``y`` under covariance ``sigma + tau I``."""
    y = np.asarray(y, dtype=np.float64)
    C = _noisy(sigma, tau)
    sign, logdet = np.linalg.slogdet(C)
    if sign <= 0:
        raise NumericalError("dense covariance is not positive definite")
    quad = float(y @ np.linalg.solve(C, y))
    return -0.5 * (len(y) * np.log(2.0 * np.pi) + logdet + quad)


def exact_predict_dense(cov: DenseMRACovariance, tau: float, y, queries) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and variance at ``queries`` under the MRA prior (nugget-free)."""
    cross, pvar = cov.joint(queries)
    C = _noisy(cov.sigma, tau)
    sol = np.linalg.solve(C, np.column_stack([np.asarray(y, dtype=np.float64), cross]))
    mean = cross.T @ sol[:, 0]
    var = pvar - np.einsum("ij,ij->j", cross, sol[:, 1:])
    return mean, var
