"""Bounded derivative-free maximization of the log-likelihood.

The trust-region/quadratic-model search itself is Py-BOBYQA; this module
owns the problem definition, the parameter transform, bound enforcement,
the handling of non-finite objective values and the evaluation bookkeeping.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pybobyqa

from pymra.errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

RHO_END = 1e-6
RHO_BEGIN = 0.1


@dataclass
class OptimizationProblem:
    """Maximize ``objective(x)`` over the box ``lower <= x <= upper``."""

    objective: Callable[[np.ndarray], float]
    lower: Sequence[float]
    upper: Sequence[float]
    initial: Sequence[float]
    max_iterations: int
    names: Sequence[str] = ("alpha", "beta", "tau")

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        n = len(self.initial)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ConfigError("bounds and initial guess must have the same length")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ConfigError("optimization bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ConfigError("lower bounds must not exceed upper bounds")
        if np.any(self.initial < self.lower) or np.any(self.initial > self.upper):
            raise ConfigError("initial guess lies outside the bounds")
        if self.max_iterations < 1:
            raise ConfigError("MAX_ITERATIONS must be at least 1", key="MAX_ITERATIONS")
        if len(self.names) != n:
            self.names = tuple(f"x{k}" for k in range(n))


@dataclass
class OptimizationResult:
    x: np.ndarray
    loglik: float
    evaluations: int
    history: list = field(default_factory=list)
    message: str = ""


class _Transform:
    """Log coordinates for parameters with a positive lower bound, identity otherwise."""

    def __init__(self, lower, upper):
        self.log = lower > 0

    def forward(self, x):
        z = np.array(x, dtype=np.float64)
        z[self.log] = np.log(z[self.log])
        return z

    def inverse(self, z):
        x = np.array(z, dtype=np.float64)
        x[self.log] = np.exp(x[self.log])
        return x


def maximize_likelihood(problem: OptimizationProblem) -> OptimizationResult:
    """Best evaluated point of a bounded BOBYQA search, in natural coordinates.

    Parameters whose bounds coincide are held fixed. Every evaluated point is
    clipped into the box; an evaluation limit of ``max_iterations`` is
    enforced, counting the initial evaluation.
    """
    lo, hi = problem.lower, problem.upper
    free = lo < hi
    tf = _Transform(lo[free], hi[free])
    history: list = []
    state = {"best": -np.inf, "best_x": None, "worst": None}

    def natural(zfree) -> np.ndarray:
        x = problem.initial.copy()
        x[free] = np.clip(tf.inverse(zfree), lo[free], hi[free])
        return x

    def evaluate(x) -> float:
        if len(history) >= problem.max_iterations:
            return np.nan
        try:
            value = float(problem.objective(x))
        except NumericalError as exc:
            log.warning("evaluation at %s failed: %s", _fmt(problem.names, x), exc)
            value = np.nan
        history.append((x.copy(), value))
        log.info("iteration %d: %s loglik=%.10g", len(history), _fmt(problem.names, x), value)
        if np.isfinite(value):
            if value > state["best"]:
                state["best"], state["best_x"] = value, x.copy()
            state["worst"] = value if state["worst"] is None else min(state["worst"], value)
        return value

    f0 = evaluate(problem.initial.copy())
    if not np.isfinite(f0):
        raise NumericalError(f"log-likelihood is not finite at the initial guess {_fmt(problem.names, problem.initial)}")
    if not np.any(free) or problem.max_iterations == 1:
        return OptimizationResult(state["best_x"], state["best"], len(history), history, "no free evaluations left")

    z0 = tf.forward(problem.initial[free])
    zlo, zhi = tf.forward(lo[free]), tf.forward(hi[free])
    first = {"pending": True}

    def objfun(z):
        if first["pending"] and np.array_equal(z, z0):
            first["pending"] = False
            return -f0
        first["pending"] = False
        value = evaluate(natural(z))
        if not np.isfinite(value):
            # Discard the point: report something clearly worse than anything seen.
            worst = state["worst"]
            return -(worst - (abs(worst) + 1.0))
        return -value

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = pybobyqa.solve(
            objfun,
            z0,
            bounds=(zlo, zhi),
            maxfun=problem.max_iterations,
            rhobeg=RHO_BEGIN,
            rhoend=RHO_END,
            scaling_within_bounds=True,
        )
    log.info("search finished after %d evaluations: %s", len(history), sol.msg)
    return OptimizationResult(state["best_x"], state["best"], len(history), history, str(sol.msg))


def _fmt(names, x) -> str:
    return " ".join(f"{n}={v:.10g}" for n, v in zip(names, x))
