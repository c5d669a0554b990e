"""Decorr: split a dataset into environments with low within-environment feature correlation.

Each round optimises per-sample inclusion probabilities on the points not yet
assigned, minimising the squared Frobenius distance between their weighted
correlation matrix and the identity plus a penalty pulling the mean weight towards
the share of data the round should take. Points are then drawn with those
probabilities into a new environment.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, asdict
from typing import Callable, NamedTuple

import numpy as np

from .numerics import DegenerateColumnWarning, as_data_matrix, decorr_loss_and_grad, standardize
from .partition import Partition, fill_environment, single_environment

log = logging.getLogger(__name__)


@dataclass
class DecorrConfig:
    k: int = 2
    p0: float = 0.1
    alpha: float = 0.1
    T: int = 5000
    lam: float = 100.0
    tol: float = 1e-8
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.p0 < 1:
            raise ValueError("p0 must lie in (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class WeightFit(NamedTuple):
    w: np.ndarray
    loss: float
    iterations: int
    initial_loss: float
    degenerate: bool


def optimize_weights(X, cfg: DecorrConfig, target_mean: float, rng=None,
                     callback: Callable[[int, np.ndarray, float], None] | None = None) -> WeightFit:
    """Projected gradient descent on the sample weights, box ``[p0, 1]``.

    Starts from ``Uniform[p0, 1]`` draws and stops once the loss changes by less than
    ``cfg.tol`` between iterations or after ``cfg.T`` steps.
    """
    X = as_data_matrix(X)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    w = rng.uniform(cfg.p0, 1.0, size=X.shape[0])

    loss, grad, degenerate = decorr_loss_and_grad(X, w, cfg.lam, target_mean)
    initial = loss
    t = 0
    while t < cfg.T:
        w = np.clip(w - cfg.alpha * grad, cfg.p0, 1.0)
        t += 1
        new_loss, grad, deg = decorr_loss_and_grad(X, w, cfg.lam, target_mean)
        degenerate |= deg
        if callback is not None:
            callback(t, w, new_loss)
        done = abs(new_loss - loss) < cfg.tol
        loss = new_loss
        if done:
            break
    if degenerate:
        warnings.warn("near-constant column encountered while optimising weights",
                      DegenerateColumnWarning, stacklevel=2)
    return WeightFit(w, float(loss), t, float(initial), degenerate)


def decorr_partition(X, cfg: DecorrConfig | None = None) -> Partition:
    """Partition the rows of ``X`` into ``cfg.k`` environments."""
    cfg = cfg or DecorrConfig()
    X = as_data_matrix(X)
    n = X.shape[0]
    if n < 2 * cfg.k:
        raise ValueError(f"decorr needs n >= 2k, got n={n}, k={cfg.k}")
    if cfg.k == 1:
        return single_environment(n, seed=cfg.seed, method="decorr")

    Z = standardize(X) if cfg.standardize else X
    rng = np.random.default_rng(cfg.seed)
    assignments = np.full(n, cfg.k - 1, dtype=int)
    remaining = np.arange(n)
    trace = []
    for j in range(cfg.k - 1):
        envs_left = cfg.k - j
        fit = optimize_weights(Z[remaining], cfg, 1.0 / envs_left, rng)
        log.debug("round %d: loss %.6g after %d iterations", j, fit.loss, fit.iterations)
        trace.append(fit.loss)
        chosen = rng.random(remaining.shape[0]) < fit.w
        chosen = fill_environment(chosen, fit.w, envs_left - 1, rng)
        assignments[remaining[chosen]] = j
        remaining = remaining[~chosen]

    part = Partition(assignments, k=cfg.k, objective_trace=trace, seed=cfg.seed, method="decorr")
    part.validate(n)
    return part
