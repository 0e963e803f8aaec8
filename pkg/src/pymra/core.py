"""Region-level kernels of the fast MRA algorithm and serial drivers.

Basis coefficients are kept in whitened form: for region ``i`` at level ``m``
with ancestor chain ``a_1, ..., a_{m-1}`` the block
``G_i[k] = L_{a_k}^{-1} C_k(Q_{a_k}, Q_i)`` (``L`` the lower Cholesky factor of
the ancestor's own covariance ``C_k(Q, Q)``) satisfies

    C_l(Q_i, Q_{a_l}) = C(Q_i, Q_{a_l}) - sum_{k<l} G_i[k]^T G_{a_l}[k].

The basis weights are therefore independent standard normal vectors ``xi``,
and the ascending pass integrates them out region by region from the finest
level up, accumulating the log-determinant and quadratic-form terms of the
Gaussian log-likelihood. Moment blocks ("ATilde") over ancestor pairs are
stored as packed upper-triangular block arrays of shape
``(K(K+1)/2, r_hat, r_hat)`` in k-major pair order.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from pymra.errors import NumericalError, StructureError
from pymra.kernel import CovarianceParams, cross_covariance_matrix
from pymra.partition import PartitionTree

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


# --------------------------------------------------------------------------- packing


@lru_cache(maxsize=None)
def _pairs(K: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(K)


def pair_count(K: int) -> int:
    return K * (K + 1) // 2


def pair_index(k: int, l: int, K: int) -> int:
    """Position of block (k, l), k <= l < K, in k-major packed order."""
    return k * K - k * (k - 1) // 2 + (l - k)


def pack_upper(full: np.ndarray, K: int, r: int) -> np.ndarray:
    blocks = full.reshape(K, r, K, r).transpose(0, 2, 1, 3)
    ku, lu = _pairs(K)
    return np.ascontiguousarray(blocks[ku, lu])


def unpack_full(packed: np.ndarray, K: int) -> np.ndarray:
    """Symmetric (K r) x (K r) matrix from packed upper blocks."""
    r = packed.shape[1]
    full = np.zeros((K, K, r, r))
    ku, lu = _pairs(K)
    full[ku, lu] = packed
    full[lu, ku] = packed.transpose(0, 2, 1)
    return full.transpose(0, 2, 1, 3).reshape(K * r, K * r)


@lru_cache(maxsize=None)
def _keep_after_elimination(K: int) -> np.ndarray:
    ku, lu = _pairs(K)
    return np.flatnonzero(lu < K - 1)


@lru_cache(maxsize=None)
def _last_column(K: int) -> np.ndarray:
    return np.array([pair_index(k, K - 1, K) for k in range(K)])


# --------------------------------------------------------------------------- prior


@dataclass
class PriorQuantities:
    """Prior pieces of one region.

    ``K`` is ``C_m(Q, Q)`` without nugget, ``chol`` the lower Cholesky factor of
    ``K`` (plus ``tau I`` at the finest level) and ``G`` the stacked whitened
    cross blocks with ancestors, shape ``((m-1) r_hat, n_knots)``.
    """

    region: int
    level: int
    K: np.ndarray
    chol: np.ndarray
    G: np.ndarray

    @property
    def n_knots(self) -> int:
        return self.K.shape[0]

    def nbytes(self) -> int:
        return self.K.nbytes + self.chol.nbytes + self.G.nbytes


def _cholesky(a: np.ndarray, region, tree: PartitionTree) -> np.ndarray:
    if a.shape[0] == 0:
        return a.copy()
    try:
        return cholesky(a, lower=True, check_finite=False)
    except LinAlgError:
        rid = tree.region_id(region) if tree is not None else region
        raise NumericalError(
            f"covariance of region {rid} (index {region}) is not positive definite; "
            "try a larger TAU or fewer knots"
        ) from None


def basis_blocks(
    tree: PartitionTree, params: CovarianceParams, points: np.ndarray, chain, prior
) -> np.ndarray:
    """Whitened basis of ``points`` against the regions in ``chain`` (root first).

    Returns ``((len(chain)) r_hat, n_points)``; block ``k`` is
    ``L_{a_k}^{-1} C_k(Q_{a_k}, points)``.
    """
    r = tree.r_hat
    n = len(points)
    G = np.empty((len(chain) * r, n))
    for l, a in enumerate(chain):
        pa = prior[a]
        b = cross_covariance_matrix(pa_knots(tree, a), points, params)  # (r, n)
        if l:
            b -= pa.G.T @ G[: l * r]
        G[l * r : (l + 1) * r] = solve_triangular(pa.chol, b, lower=True, check_finite=False)
    return G


def pa_knots(tree: PartitionTree, region: int) -> np.ndarray:
    return tree.knots[region]


def region_prior(tree: PartitionTree, params: CovarianceParams, region: int, prior) -> PriorQuantities:
    """Prior quantities of ``region``; ``prior`` must already hold every ancestor."""
    chain = tree.ancestors(region)
    m = len(chain)
    Q = tree.knots[region]
    G = basis_blocks(tree, params, Q, chain[:-1], prior)
    K = cross_covariance_matrix(Q, Q, params)
    if m > 1 and len(Q):
        K -= G.T @ G
        K = 0.5 * (K + K.T)
    V = K
    if m == tree.M and params.tau:
        V = K.copy()
        V[np.diag_indices_from(V)] += params.tau
    return PriorQuantities(region, m, K, _cholesky(V, region, tree), G)


def compute_prior(tree: PartitionTree, params: CovarianceParams, regions=None, finest: bool = True) -> dict:
    """Prior quantities for ``regions`` (default: all) plus their ancestors, by level.

    With ``finest=False`` the finest level is skipped; its dense blocks are
    the largest and are better built one region at a time when needed.
    """
    if regions is None:
        wanted = set(range(tree.n_regions))
    else:
        wanted = set()
        for i in regions:
            wanted.update(tree.ancestors(i))
    prior: dict = {}
    for m in range(1, tree.M + (1 if finest else 0)):
        for i in tree.by_level[m]:
            if int(i) in wanted:
                prior[int(i)] = region_prior(tree, params, int(i), prior)
    return prior


# --------------------------------------------------------------------------- ascending pass


class ATildeTracker:
    """Resident-byte accounting for moment blocks during the ascending pass."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def add(self, arr) -> None:
        if arr is None:
            return
        with self._lock:
            self.current += arr.nbytes
            self.peak = max(self.peak, self.current)

    def remove(self, arr) -> None:
        if arr is None:
            return
        with self._lock:
            self.current -= arr.nbytes


@dataclass
class Message:
    """Moment blocks passed from a region to its parent (``None`` means zero)."""

    A: np.ndarray | None
    omega: np.ndarray | None
    spilled: bool = False


@dataclass
class Conditional:
    """Conditional law of a region's weights given its ancestors' weights.

    ``xi | xi_anc ~ N(L^{-T}(z - W xi_anc), (L L^T)^{-1})``; ``L is None``
    means no data below the region (prior law).
    """

    L: np.ndarray | None
    W: np.ndarray | None
    z: np.ndarray | None


def leaf_posterior(tree: PartitionTree, pq: PriorQuantities, y: np.ndarray):
    """Finest-region step: returns (d, u, Message)."""
    n = pq.n_knots
    if n == 0:
        return 0.0, 0.0, Message(None, None)
    L = pq.chol
    z = solve_triangular(L, y, lower=True, check_finite=False)
    d = 2.0 * float(np.sum(np.log(np.diag(L))))
    u = float(z @ z)
    K = tree.M - 1
    if K == 0:
        return d, u, Message(None, None)
    r = tree.r_hat
    Z = solve_triangular(L, pq.G.T, lower=True, check_finite=False)
    A = pack_upper(Z.T @ Z, K, r)
    omega = (Z.T @ z).reshape(K, r)
    return d, u, Message(A, omega)


def accumulate(messages, tracker: ATildeTracker | None = None, spill_dir=None, regions=None):
    """Sum child messages in order, reusing the first non-empty buffer."""
    A = omega = None
    for idx, msg in enumerate(messages):
        a = msg.A
        if msg.spilled:
            a = spill_load(regions[idx], spill_dir)
            if tracker:
                tracker.add(a)
        if a is not None:
            if A is None:
                A = a
            else:
                A += a
                if tracker:
                    tracker.remove(a)
        if msg.omega is not None:
            omega = msg.omega if omega is None else omega + msg.omega
        msg.A = None
    return Message(A, omega)


def eliminate(agg: Message, level: int, r: int, tracker: ATildeTracker | None = None, keep: bool = False):
    """Integrate out the weights of a level-``level`` region.

    ``agg`` holds the summed child blocks over ancestor indices ``1..level``.
    Returns (d, u, Message for the parent, Conditional or None).
    """
    K = level
    if agg.A is None:
        cond = Conditional(None, None, None) if keep else None
        return 0.0, 0.0, Message(None, None), cond
    A, omega = agg.A, agg.omega
    P = A[pair_index(K - 1, K - 1, K)].copy()
    P[np.diag_indices_from(P)] += 1.0
    try:
        L = cholesky(P, lower=True, check_finite=False)
    except LinAlgError:
        raise NumericalError(f"posterior precision at level {level} is not positive definite") from None
    d = 2.0 * float(np.sum(np.log(np.diag(L))))
    z = solve_triangular(L, omega[K - 1], lower=True, check_finite=False)
    u = -float(z @ z)
    if K == 1:
        if tracker:
            tracker.remove(A)
        cond = Conditional(L, np.zeros((r, 0)), z) if keep else None
        return d, u, Message(None, None), cond
    U = A[_last_column(K)[:-1]]  # blocks (k, K-1), k < K-1
    Ut = U.transpose(2, 0, 1).reshape(r, (K - 1) * r)  # [U_0^T, ..., U_{K-2}^T]
    W = solve_triangular(L, Ut, lower=True, check_finite=False)
    newA = A[_keep_after_elimination(K)]
    newA -= pack_upper(W.T @ W, K - 1, r)
    if tracker:
        tracker.add(newA)
        tracker.remove(A)
    new_omega = omega[: K - 1] - (W.T @ z).reshape(K - 1, r)
    cond = Conditional(L, W, z) if keep else None
    return d, u, Message(newA, new_omega), cond


def assemble_loglik(n_obs: int, d_sum: float, u_sum: float) -> float:
    return -0.5 * (n_obs * LOG_2PI + d_sum + u_sum)


# --------------------------------------------------------------------------- spill


def spill_path(region: int, directory) -> Path:
    return Path(directory) / f"atilde_{region}.bin"


def spill_store(region: int, blocks, directory) -> Path:
    """Write packed blocks as: u64 block count, u64 (rows, cols) per block, raw <f8 data."""
    path = spill_path(region, directory)
    try:
        with open(path, "wb") as fh:
            if blocks is None or len(blocks) == 0:
                fh.write(np.array([0], dtype="<u8").tobytes())
                return path
            nb, rows, cols = blocks.shape
            header = [nb] + [rows, cols] * nb
            fh.write(np.array(header, dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(blocks, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot spill moment blocks of region {region} to {path}: {exc}") from exc
    return path


def spill_load(region: int, directory, delete: bool = True):
    """Inverse of :func:`spill_store`; returns ``None`` for header-only files."""
    path = spill_path(region, directory)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot load spilled blocks of region {region} from {path}: {exc}") from exc
    nb = int(np.frombuffer(raw, dtype="<u8", count=1)[0])
    if delete:
        os.remove(path)
    if nb == 0:
        return None
    dims = np.frombuffer(raw, dtype="<u8", count=2 * nb, offset=8).reshape(nb, 2)
    rows, cols = (int(v) for v in dims[0])
    if np.any(dims != dims[0]):
        raise StructureError(f"spill file of region {region} has mixed block shapes")
    data = np.frombuffer(raw, dtype="<f8", offset=8 + 16 * nb)
    return data.reshape(nb, rows, cols).astype(np.float64)


# --------------------------------------------------------------------------- descending pass


@dataclass
class Posterior:
    """Posterior mean of a region's weights and its covariance row with the chain.

    ``row`` has shape ``(r_hat, m r_hat)``: covariances with ``a_1 .. a_m``,
    the last block being the region's own posterior covariance.
    """

    mean: np.ndarray
    row: np.ndarray


def chain_moments(chain, posts, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the stacked weights of ``chain`` (root first)."""
    K = len(chain)
    mean = np.empty(K * r)
    cov = np.empty((K * r, K * r))
    for k, a in enumerate(chain):
        p = posts[a]
        mean[k * r : (k + 1) * r] = p.mean
        cov[k * r : (k + 1) * r, : (k + 1) * r] = p.row
        cov[: k * r, k * r : (k + 1) * r] = p.row[:, : k * r].T
    return mean, cov


def descend(cond: Conditional, chain_mean: np.ndarray, chain_cov: np.ndarray, r: int) -> Posterior:
    """Posterior of one region's weights given the ancestors' posterior moments."""
    K = len(chain_mean) // r
    if cond.L is None:
        row = np.zeros((r, (K + 1) * r))
        row[:, K * r :] = np.eye(r)
        return Posterior(np.zeros(r), row)
    L, W, z = cond.L, cond.W, cond.z
    if K:
        mean = solve_triangular(L, z - W @ chain_mean, lower=True, trans="T", check_finite=False)
        T = W @ chain_cov
        cross = -solve_triangular(L, T, lower=True, trans="T", check_finite=False)
        inner = np.eye(r) + T @ W.T
    else:
        mean = solve_triangular(L, z, lower=True, trans="T", check_finite=False)
        cross = np.zeros((r, 0))
        inner = np.eye(r)
    Li = solve_triangular(L, np.eye(r), lower=True, check_finite=False)
    own = Li.T @ inner @ Li
    own = 0.5 * (own + own.T)
    return Posterior(mean, np.hstack([cross, own]))


def predict_leaf(
    tree: PartitionTree,
    params: CovarianceParams,
    region: int,
    points: np.ndarray,
    prior,
    y_leaf: np.ndarray,
    chain_mean: np.ndarray,
    chain_cov: np.ndarray,
):
    """Posterior mean and variance (without nugget) at ``points`` inside finest ``region``."""
    chain = tree.ancestors(region)[:-1]
    pf = prior[region]
    Gp = basis_blocks(tree, params, points, chain, prior)
    Qf = tree.knots[region]
    cpp = params.alpha - np.einsum("ij,ij->j", Gp, Gp)
    if len(Qf):
        c = cross_covariance_matrix(Qf, points, params)
        if len(chain):
            c -= pf.G.T @ Gp
        L = pf.chol
        S = solve_triangular(L, c, lower=True, check_finite=False)
        ys = solve_triangular(L, y_leaf, lower=True, check_finite=False)
        mean = S.T @ ys
        var = cpp - np.einsum("ij,ij->j", S, S)
        if len(chain):
            Zf = solve_triangular(L, pf.G.T, lower=True, check_finite=False)
            g = Gp - Zf.T @ S
        else:
            g = Gp
    else:
        mean = np.zeros(len(points))
        var = cpp
        g = Gp
    if len(chain):
        mean = mean + g.T @ chain_mean
        var = var + np.einsum("ij,ij->j", g, chain_cov @ g)
    return mean, np.maximum(var, 0.0)


# --------------------------------------------------------------------------- serial drivers


@dataclass
class PosteriorPassResult:
    loglik: float
    d: dict
    u: dict
    conditionals: dict
    n_obs: int
    peak_atilde_bytes: int

    @property
    def loglik_without_constant(self) -> float:
        return self.loglik + 0.5 * self.n_obs * LOG_2PI


def leaf_values(tree: PartitionTree, y: np.ndarray, position: int) -> np.ndarray:
    return np.asarray(y, dtype=np.float64)[tree.obs_index[position]]


def posterior_pass(
    tree: PartitionTree,
    prior: dict,
    y: np.ndarray,
    keep: bool = False,
    spill_dir=None,
    tracker: ATildeTracker | None = None,
    params: CovarianceParams | None = None,
) -> PosteriorPassResult:
    """Ascending pass over the whole tree.

    ``y`` is indexed like the ObservationSet the tree was built from. With
    ``keep`` the per-region conditionals needed for prediction are retained.
    Finest regions missing from ``prior`` are built on the fly from
    ``params`` and dropped after use.
    """
    tracker = tracker or ATildeTracker()
    r = tree.r_hat
    d, u, conds = {}, {}, {}
    msgs: dict = {}
    for pos, f in enumerate(tree.finest):
        f = int(f)
        pq = prior.get(f)
        if pq is None and params is not None:
            pq = region_prior(tree, params, f, prior)
        if pq is None:
            raise StructureError(f"missing prior quantities for finest region {f}")
        yl = leaf_values(tree, y, pos)
        if len(yl) != pq.n_knots:
            raise StructureError(f"region {f}: {len(yl)} values for {pq.n_knots} knots")
        d[f], u[f], msg = leaf_posterior(tree, pq, yl)
        tracker.add(msg.A)
        msgs[f] = _maybe_spill(f, msg, spill_dir, tracker)
    for m in range(tree.M - 1, 0, -1):
        for i in tree.by_level[m]:
            i = int(i)
            kids = [int(c) for c in tree.children[i]]
            agg = accumulate([msgs.pop(c) for c in kids], tracker, spill_dir, kids)
            d[i], u[i], msg, cond = eliminate(agg, m, r, tracker, keep)
            if keep:
                conds[i] = cond
            if m > 1:
                msgs[i] = _maybe_spill(i, msg, spill_dir, tracker)
    order = range(tree.n_regions)
    d_sum = float(sum(d[i] for i in order))
    u_sum = float(sum(u[i] for i in order))
    n_obs = tree.n_obs
    return PosteriorPassResult(assemble_loglik(n_obs, d_sum, u_sum), d, u, conds, n_obs, tracker.peak)


def _maybe_spill(region: int, msg: Message, spill_dir, tracker) -> Message:
    if spill_dir is None:
        return msg
    spill_store(region, msg.A, spill_dir)
    if tracker:
        tracker.remove(msg.A)
    return Message(None, msg.omega, spilled=True)


def loglikelihood(tree: PartitionTree, params: CovarianceParams, y, spill_dir=None) -> float:
    """MRA log-likelihood of the retained observations at ``params``."""
    prior = compute_prior(tree, params, finest=False)
    return posterior_pass(tree, prior, y, spill_dir=spill_dir, params=params).loglik


def posterior_weights(tree: PartitionTree, conditionals: dict) -> dict:
    """Top-down posterior moments of every pre-finest region's weights."""
    r = tree.r_hat
    posts: dict = {}
    for m in range(1, tree.M):
        for i in tree.by_level[m]:
            i = int(i)
            chain = tree.ancestors(i)[:-1]
            mean, cov = chain_moments(chain, posts, r)
            posts[i] = descend(conditionals[i], mean, cov, r)
    return posts


def predict(tree: PartitionTree, params: CovarianceParams, y, locations) -> tuple[np.ndarray, np.ndarray]:
    """Kriging mean and variance (nugget excluded); NaN for points outside the domain."""
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    prior = compute_prior(tree, params, finest=False)
    res = posterior_pass(tree, prior, y, keep=True, params=params)
    posts = posterior_weights(tree, res.conditionals)
    pos = tree.locate(locations[:, 0], locations[:, 1])
    mean = np.full(len(locations), np.nan)
    var = np.full(len(locations), np.nan)
    outside = int(np.sum(pos < 0))
    if outside:
        log.warning("%d prediction locations fall outside the domain", outside)
    r = tree.r_hat
    for k in np.unique(pos[pos >= 0]):
        f = int(tree.finest[k])
        sel = np.flatnonzero(pos == k)
        chain = tree.ancestors(f)[:-1]
        cm, cc = chain_moments(chain, posts, r)
        prior[f] = region_prior(tree, params, f, prior)
        mean[sel], var[sel] = predict_leaf(
            tree, params, f, locations[sel], prior, leaf_values(tree, y, int(k)), cm, cc
        )
        del prior[f]
    return mean, var
