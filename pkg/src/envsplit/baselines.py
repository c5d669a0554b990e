"""Baseline environment partitioners: random split, k-means on features, EIIL."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .models import ModelParams, pointwise_loss, predict
from .numerics import as_data_matrix, standardize
from .partition import Partition, fill_environment, single_environment


def random_partition(n: int, k: int, seed: int = 0, max_tries: int = 100) -> Partition:
    """Uniform random environment ids, redrawn while any environment is empty."""
    if k < 1 or n < k:
        raise ValueError(f"random partition needs n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        a = rng.integers(0, k, size=n)
        if np.bincount(a, minlength=k).min() > 0:
            break
    else:
        a = rng.integers(0, k, size=n)
        a[rng.permutation(n)[:k]] = np.arange(k)
    return Partition(a, k=k, seed=seed, method="random")


# -- k-means -----------------------------------------------------------------------------

def _kmeanspp(X: np.ndarray, k: int, rng) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a centre already picked
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(free))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return X[chosen].copy()


def _assign(X, centers):
    d2 = np.sum(X * X, axis=1)[:, None] - 2 * X @ centers.T + np.sum(centers * centers, axis=1)
    return np.argmin(d2, axis=1)


def _wcss(X, labels, centers) -> float:
    return float(np.sum((X - centers[labels]) ** 2))


def lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    """Lloyd iterations until assignments stop changing.

    Returns labels, centres and the within-cluster sum of squares after every centre update.
    """
    k = centers.shape[0]
    labels = _assign(X, centers)
    trace = []
    for _ in range(max_iter):
        for c in range(k):
            members = labels == c
            if not members.any():
                # reseed an empty cluster at the point worst served by its centre
                far = int(np.argmax(np.sum((X - centers[labels]) ** 2, axis=1)))
                labels[far] = c
                members = labels == c
            centers[c] = X[members].mean(axis=0)
        trace.append(_wcss(X, labels, centers))
        new = _assign(X, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centers, trace


def kmeans_partition(X, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300,
                     standardize_features: bool = True) -> Partition:
    """k-means++ seeded Lloyd clustering, best of ``n_init`` restarts by WCSS."""
    X = as_data_matrix(X)
    n = X.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"k-means needs n >= k >= 1, got n={n}, k={k}")
    if k == 1:
        return single_environment(n, seed=seed, method="kmeans")
    if np.unique(X, axis=0).shape[0] < k:
        raise ValueError("fewer distinct points than clusters")
    Z = standardize(X) if standardize_features else X
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centers, trace = lloyd(Z, _kmeanspp(Z, k, rng), max_iter)
        if best is None or trace[-1] < best[2][-1]:
            best = (labels, centers, trace)
    part = Partition(best[0], k=k, objective_trace=best[2], seed=seed, method="kmeans")
    part.validate(n)
    return part


# -- EIIL ---------------------------------------------------------------------------------

@dataclass
class EiilConfig:
    steps: int = 10000
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _scale_grads(reference: ModelParams, X, y) -> np.ndarray:
    """Per-sample derivative of the loss of ``scale * f(x_i)`` at ``scale = 1``."""
    f = predict(reference, X)
    _, d1, _ = pointwise_loss(f, y, reference.loss_kind)
    return f * d1


def eiil_objective(q: np.ndarray, a: np.ndarray) -> float:
    """Mean of the two soft-environment IRMv1 penalties."""
    ga = np.mean(a * q)
    gb = np.mean(a * (1 - q))
    return 0.5 * (ga * ga + gb * gb)


def eiil_soft_assignment(X, y, cfg: EiilConfig, reference: ModelParams):
    """Adam ascent of the EIIL objective in ``q = sigmoid(s)``.

    Returns the final ``q`` and the objective recorded before the first and after every step.
    """
    if not reference.telemetry:
        raise ValueError("EIIL needs a trained reference model")
    X = as_data_matrix(X)
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError("EIIL supports a single scalar target per row")
    if reference.task == "classification" and not np.all((y == 0) | (y == 1)):
        raise ValueError("EIIL classification targets must be binary {0, 1}")
    a = _scale_grads(reference, X, y)
    n = a.shape[0]
    rng = np.random.default_rng(cfg.seed)
    s = rng.standard_normal(n)
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = []
    for t in range(1, cfg.steps + 1):
        q = 1.0 / (1.0 + np.exp(-s))
        ga = np.mean(a * q)
        gb = np.mean(a * (1 - q))
        trace.append(0.5 * (ga * ga + gb * gb))
        # g is the negated objective gradient, so the Adam descent step ascends
        g = -(ga - gb) * a / n * q * (1 - q)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        s = s - cfg.lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    q = 1.0 / (1.0 + np.exp(-s))
    trace.append(eiil_objective(q, a))
    return q, trace


def eiil_partition(X, y, cfg: EiilConfig, reference: ModelParams) -> Partition:
    """Two environments inferred to maximally violate invariance of ``reference``."""
    q, trace = eiil_soft_assignment(X, y, cfg, reference)
    rng = np.random.default_rng([cfg.seed, 1])
    first = fill_environment(rng.random(q.shape[0]) < q, q, 1, rng)
    assignments = np.where(first, 0, 1)
    part = Partition(assignments, k=2, objective_trace=[trace[0], trace[-1]], seed=cfg.seed,
                     method="eiil")
    part.validate(q.shape[0])
    return part
