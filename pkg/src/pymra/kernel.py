"""Exponential covariance function and block evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class CovarianceParams:
    """Sill ``alpha``, range ``beta`` and nugget ``tau`` of the kernel."""

    alpha: float
    beta: float
    tau: float = 0.0

    def __post_init__(self):
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (self.tau >= 0 and np.isfinite(self.tau)):
            raise ValueError(f"tau must be non-negative, got {self.tau}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.tau])


def covariance(p, q, params: CovarianceParams) -> float:
    """alpha * exp(-d / beta) for planar Euclidean distance d (no nugget)."""
    d = np.hypot(p[0] - q[0], p[1] - q[1])
    return float(params.alpha * np.exp(-d / params.beta))


def cross_covariance_matrix(a: np.ndarray, b: np.ndarray, params: CovarianceParams) -> np.ndarray:
    """Matrix of kernel values between location sets ``a`` (n, 2) and ``b`` (m, 2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    d = cdist(a, b)
    return params.alpha * np.exp(-d / params.beta)


def add_nugget(k: np.ndarray, tau: float) -> np.ndarray:
    """Return ``k + tau * I``; ``k`` is not modified."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"nugget needs a square matrix, got shape {k.shape}")
    out = k.copy()
    out[np.diag_indices_from(out)] += tau
    return out
