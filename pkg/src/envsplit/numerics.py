"""Weighted correlation statistics and the decorrelation objective.

Weights act as fractional frequencies: ``c_jk = sum_i w_i (x_ij - mu_j)(x_ik - mu_k) / sum_i w_i``,
so integer weights are equivalent to replicating rows.
"""
from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

EPS = 1e-12
DEGENERATE_VAR = 1e-10


class DegenerateColumnWarning(RuntimeWarning):
    """A column is (nearly) constant under the given weights."""


class LossGrad(NamedTuple):
    loss: float
    grad: np.ndarray
    degenerate: bool


def as_data_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d data matrix, got shape {X.shape}")
    n, p = X.shape
    if n < 2 or p < 1:
        raise ValueError(f"data matrix needs n >= 2 and p >= 1, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("data matrix contains NaN or Inf")
    return X


def _check_weights(X: np.ndarray, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != X.shape[0]:
        raise ValueError(f"weight vector of length {w.shape} does not match {X.shape[0]} rows")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise ValueError("weights sum to zero")
    return w


def weighted_mean(X, w) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = _check_weights(X, w)
    return w @ X / w.sum()


def _moments(X: np.ndarray, w: np.ndarray):
    s = w.sum()
    mu = w @ X / s
    Xc = X - mu
    C = (Xc * w[:, None]).T @ Xc / s
    C = 0.5 * (C + C.T)
    return s, Xc, C


def weighted_covariance(X, w) -> np.ndarray:
    X = as_data_matrix(X)
    w = _check_weights(X, w)
    return _moments(X, w)[2]


def _normalize(C: np.ndarray):
    d = np.diag(C) + EPS
    inv_sqrt = 1.0 / np.sqrt(d)
    R = C * np.outer(inv_sqrt, inv_sqrt)
    return R, d, inv_sqrt


def weighted_correlation(X, w=None) -> np.ndarray:
    """Weighted Pearson correlation matrix of the columns of ``X``.

    Parameters
    ----------
    X : array (n, p)
    w : array (n,), optional
        Non-negative sample weights; uniform if omitted.

    Returns
    -------
    R : array (p, p)
        Symmetric with unit diagonal (up to the ``EPS`` guard in the denominator).
    """
    X = as_data_matrix(X)
    w = np.ones(X.shape[0]) if w is None else _check_weights(X, w)
    _, _, C = _moments(X, w)
    if np.any(np.diag(C) < DEGENERATE_VAR):
        bad = np.flatnonzero(np.diag(C) < DEGENERATE_VAR).tolist()
        warnings.warn(f"near-constant columns {bad} under the given weights",
                      DegenerateColumnWarning, stacklevel=2)
    return _normalize(C)[0]


def frobenius_dist_sq(R) -> float:
    """Squared Frobenius distance between ``R`` and the identity."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {R.shape}")
    return float(np.sum((R - np.eye(R.shape[0])) ** 2))


def correlation_score(X) -> float:
    """Unweighted d^2(R, I) of a data matrix; the quantity reported in diagnostics."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateColumnWarning)
        return frobenius_dist_sq(weighted_correlation(X))


def decorr_loss_and_grad(X, w, lam: float, target_mean: float) -> LossGrad:
    """Decorrelation loss ``d^2(R^w, I) + lam * (mean(w) - target_mean)^2`` and its gradient in ``w``.

    The gradient is closed form. With ``H = dL/dC`` (correlation normalisation folded in),
    ``dL/dw_i = ((x_i - mu)^T H (x_i - mu) - <H, C>) / sum(w)``; the mean shift term
    drops out because the weighted residuals sum to zero.

    Columns whose weighted variance falls below ``DEGENERATE_VAR`` contribute no gradient
    and set ``degenerate``.
    """
    X = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float)
    if lam < 0:
        raise ValueError("lam must be non-negative")
    n, p = X.shape
    s, Xc, C = _moments(X, w)
    R, d, inv_sqrt = _normalize(C)

    G = 2.0 * (R - np.eye(p))
    corr_loss = 0.25 * float(np.sum(G * G))
    H = G * np.outer(inv_sqrt, inv_sqrt)
    H[np.diag_indices(p)] -= np.sum(G * R, axis=1) / d

    bad = np.diag(C) < DEGENERATE_VAR
    degenerate = bool(bad.any())
    if degenerate:
        H[bad, :] = 0.0
        H[:, bad] = 0.0

    grad = (np.sum((Xc @ H) * Xc, axis=1) - np.sum(H * C)) / s

    gap = w.mean() - target_mean
    loss = corr_loss + lam * gap * gap
    grad = grad + 2.0 * lam * gap / n
    return LossGrad(float(loss), grad, degenerate)


def standardize(X) -> np.ndarray:
    """Column z-scores; constant columns are centred but left unscaled."""
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd


def max_relative_error(a, b, floor: float = 1e-8) -> float:
    """``max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)``."""
    a = np.ravel(np.asarray(a, dtype=float))
    b = np.ravel(np.asarray(b, dtype=float))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
