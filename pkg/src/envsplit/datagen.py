"""Synthetic data: the linear IRM example, the label-first SEM, a 2-d toy set and a biased resampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


# -- IRM example -------------------------------------------------------------------------

@dataclass
class IrmExampleConfig:
    d: int = 2
    sigmas: tuple[float, ...] = (0.1, 1.5, 2.0)
    n_per_env: int = 1000
    W_xy: np.ndarray | None = None
    W_yx: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("every environment sigma must be positive")
        eye = np.eye(self.d)
        self.W_xy = eye if self.W_xy is None else np.asarray(self.W_xy, dtype=float)
        self.W_yx = eye if self.W_yx is None else np.asarray(self.W_yx, dtype=float)


class IrmExampleData(NamedTuple):
    envs: list
    beta_star: np.ndarray


def gen_irm_example(cfg: IrmExampleConfig) -> IrmExampleData:
    """One ``(X, y)`` per sigma with ``X = [x1, x2]`` and ``y = sum(y_tilde)``.

    ``x1 ~ N(0, s^2 I)``, ``y_tilde ~ N(W_yx x1, s^2 I)``, ``x2 ~ N(W_xy y_tilde, I)``.
    The causal coefficients are ``(1_d, 0_d)``.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d
    envs = []
    for s in cfg.sigmas:
        n = cfg.n_per_env
        x1 = s * rng.standard_normal((n, d))
        yt = x1 @ cfg.W_yx.T + s * rng.standard_normal((n, d))
        x2 = yt @ cfg.W_xy.T + rng.standard_normal((n, d))
        envs.append((np.hstack([x1, x2]), yt.sum(axis=1)))
    beta_star = np.concatenate([np.ones(d), np.zeros(d)])
    return IrmExampleData(envs, beta_star)


@dataclass
class ClosedFormCorrTerms:
    """Pieces of the population correlation between ``x1_i`` and ``x2_j``.

    ``gamma = (W_xy W_yx)^T``; ``a_sq`` and ``b_sq`` are the diagonals of the covariances
    of ``W_xy W_yx z`` and ``W_xy z`` for standard normal ``z``.
    """
    gamma: np.ndarray
    a_sq: np.ndarray
    b_sq: np.ndarray

    @classmethod
    def from_weights(cls, W_xy, W_yx) -> "ClosedFormCorrTerms":
        W_xy = np.asarray(W_xy, dtype=float)
        W_yx = np.asarray(W_yx, dtype=float)
        M = W_xy @ W_yx
        return cls(gamma=M.T, a_sq=np.sum(M * M, axis=1), b_sq=np.sum(W_xy * W_xy, axis=1))


def closed_form_corr(terms: ClosedFormCorrTerms, sigma: float, i: int, j: int) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    s2 = sigma * sigma
    return float(sigma / np.sqrt((terms.a_sq[j] + terms.b_sq[j]) * s2 + 1.0) * terms.gamma[i, j])


# -- label-first structural equation model -----------------------------------------------

@dataclass
class SemConfig:
    """Environments with ``y = +-1``, ``z_c ~ N(y mu_c, s_c^2 I)``, ``z_e ~ N(y mu_e, s_e^2 I)``.

    ``mu_c`` and the shared part of ``mu_e`` are drawn once from ``seed`` when not given:
    ``mu_c = Z1 + 0.5 sign(Z1)`` and ``mu_e = 1.5 Z2 + noise_scale * Z_e`` with ``Z_e`` fresh
    per environment.
    """
    E: int = 2
    d_c: int = 3
    d_e: int = 6
    eta: float = 0.5
    sigma_c_sq: float = 2.0
    sigma_e_sq: float = 0.1
    n_per_env: int = 1000
    seed: int = 0
    mu_c: np.ndarray | None = None
    mu_e_shared: np.ndarray | None = None
    shared_scale: float = 1.5
    noise_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.sigma_c_sq <= 0 or self.sigma_e_sq <= 0:
            raise ValueError("variances must be positive")
        rng = np.random.default_rng([self.seed, 0x5E])
        z1 = rng.standard_normal(self.d_c)
        z2 = rng.standard_normal(self.d_e)
        if self.mu_c is None:
            self.mu_c = z1 + 0.5 * np.sign(z1)
        if self.mu_e_shared is None:
            self.mu_e_shared = self.shared_scale * z2
        self.mu_c = np.asarray(self.mu_c, dtype=float)
        self.mu_e_shared = np.asarray(self.mu_e_shared, dtype=float)

    def draw_mu_e(self, rng) -> np.ndarray:
        return self.mu_e_shared + self.noise_scale * rng.standard_normal(self.d_e)


def gen_sem_env(cfg: SemConfig, mu_e, n: int, rng):
    """One environment; returns ``X = [z_c, z_e]`` and ``y`` in {-1, +1}."""
    y = np.where(rng.random(n) < cfg.eta, 1.0, -1.0)
    zc = y[:, None] * cfg.mu_c + np.sqrt(cfg.sigma_c_sq) * rng.standard_normal((n, cfg.d_c))
    ze = y[:, None] * np.asarray(mu_e) + np.sqrt(cfg.sigma_e_sq) * rng.standard_normal((n, cfg.d_e))
    return np.hstack([zc, ze]), y


@dataclass
class SemTestFactory:
    """Fresh test environments on demand; each call is determined by its sub-seed."""
    cfg: SemConfig
    n: int = 1000

    def __call__(self, sub_seed):
        key = [int(v) for v in np.atleast_1d(sub_seed)]
        rng = np.random.default_rng([self.cfg.seed, 0x7E57, *key])
        return gen_sem_env(self.cfg, self.cfg.draw_mu_e(rng), self.n, rng)


class SemData(NamedTuple):
    train_envs: list
    test_env_factory: SemTestFactory
    mu_es: list


def gen_sem(cfg: SemConfig, test_n: int | None = None) -> SemData:
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    envs, mus = [], []
    for _ in range(cfg.E):
        mu_e = cfg.draw_mu_e(rng)
        mus.append(mu_e)
        envs.append(gen_sem_env(cfg, mu_e, cfg.n_per_env, rng))
    return SemData(envs, SemTestFactory(cfg, test_n or cfg.n_per_env), mus)


# -- toy set and biased resampling ---------------------------------------------------------

TOY_CORR = 0.8
TOY_NOISE_VAR = 0.25


def gen_toy_2d(n: int, seed: int = 0):
    """Positively correlated ``(x0, x1)``; ``y = x0 + noise``."""
    if n < 10:
        raise ValueError("toy dataset needs n >= 10")
    rng = np.random.default_rng(seed)
    cov = np.array([[1.0, TOY_CORR], [TOY_CORR, 1.0]])
    X = rng.multivariate_normal(np.zeros(2), cov, size=n)
    y = X[:, 0] + np.sqrt(TOY_NOISE_VAR) * rng.standard_normal(n)
    return X, y


MAJORITY_SHARE = 0.9


def biased_resample(X, y, bias_column: int, alpha: float, seed: int = 0):
    """Train/test split that plants a spurious link between a binary column and ``y``.

    Rows with ``x_b == y`` enter the training set at rate 0.9, rows with ``x_b != y`` at rate
    ``alpha``; everything else is test data. Returns ``(X_tr, y_tr), (X_te, y_te)`` and the
    boolean training mask.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if not 0 < alpha <= MAJORITY_SHARE:
        raise ValueError("alpha must lie in (0, 0.9]")
    xb = X[:, bias_column]
    if not (np.all(np.isin(xb, (0, 1))) and np.all(np.isin(y, (0, 1)))):
        raise ValueError("bias column and target must both be binary {0, 1}")
    rng = np.random.default_rng(seed)
    train = np.zeros(X.shape[0], dtype=bool)
    for b, t, share in ((0, 0, MAJORITY_SHARE), (1, 1, MAJORITY_SHARE), (0, 1, alpha), (1, 0, alpha)):
        idx = np.flatnonzero((xb == b) & (y == t))
        if idx.size == 0:
            raise ValueError(f"group x_b={b}, y={t} is empty")
        take = int(round(share * idx.size))
        train[rng.permutation(idx)[:take]] = True
    return (X[train], y[train]), (X[~train], y[~train]), train


def gen_pseudo_years(n_per_env: int = 300, n_envs: int = 5, seed: int = 0,
                     spurious_strengths=None):
    """Binary classification split into ``n_envs`` "years".

    Three invariant features carry a fixed noisy label signal; two spurious features follow
    the label with a strength that drifts (and flips sign) from year to year.
    Returns ``X``, ``y`` in {0, 1} and the year index of each row.
    """
    rng = np.random.default_rng(seed)
    if spurious_strengths is None:
        spurious_strengths = np.linspace(1.5, -0.5, n_envs)
    mu_c = np.array([0.6, -0.4, 0.3])
    Xs, ys, envs = [], [], []
    for e, strength in enumerate(spurious_strengths):
        y = (rng.random(n_per_env) < 0.5).astype(float)
        s = 2 * y - 1
        xc = s[:, None] * mu_c + rng.standard_normal((n_per_env, 3))
        xs = s[:, None] * strength + 0.5 * rng.standard_normal((n_per_env, 2))
        Xs.append(np.hstack([xc, xs]))
        ys.append(y)
        envs.append(np.full(n_per_env, e))
    return np.vstack(Xs), np.concatenate(ys), np.concatenate(envs)


def gen_biased_tabular(n: int = 4000, p: int = 4, seed: int = 0):
    """Balanced binary target and an independent binary column (column 0) to bias on.

    The remaining ``p`` columns are noisy label-dependent continuous features.
    """
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < 0.5).astype(float)
    xb = (rng.random(n) < 0.5).astype(float)
    mu = np.linspace(0.8, 0.2, p)
    xc = (2 * y - 1)[:, None] * mu + rng.standard_normal((n, p))
    return np.column_stack([xb, xc]), y
