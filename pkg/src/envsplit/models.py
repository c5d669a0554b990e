"""ERM, IRMv1 and V-REx training for linear, logistic and two-hidden-layer MLP predictors.

Everything is full-batch numpy with hand-written backprop and Adam. The IRMv1 penalty
of an environment is a function of that environment's outputs only (the dummy scale
multiplies the output), so its parameter gradient is obtained by back-propagating an
output-space gradient through the network; no second-order terms are needed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

KINDS = ("linear", "logistic", "mlp")
TASKS = ("regression", "classification")


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, msg: str = "non-finite loss"):
        super().__init__(f"{msg} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    beta: float = 0.0
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 1e-3
    n_iter: int = 20000
    dropout_p: float = 0.5
    warmup: int = 100
    seed: int = 0
    closed_form: bool = False
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    kind: str
    task: str
    params: dict[str, np.ndarray]
    telemetry: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def n_features(self) -> int:
        key = "W1" if self.kind == "mlp" else "coef"
        return int(self.params[key].shape[0])

    @property
    def hidden_size(self) -> int | None:
        return int(self.params["W1"].shape[1]) if self.kind == "mlp" else None

    @property
    def coef(self) -> np.ndarray:
        if self.kind == "mlp":
            raise AttributeError("mlp models have no coefficient vector")
        return self.params["coef"]

    @property
    def loss_kind(self) -> str:
        return "mse" if self.task == "regression" else "bce"

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, self.task, {k: v.copy() for k, v in self.params.items()},
                           dict(self.telemetry))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "task": self.task,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
            "weights": {k: v.ravel().tolist() for k, v in self.params.items()},
            "telemetry": self.telemetry,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        params = {k: np.asarray(d["weights"][k], dtype=float).reshape(d["shapes"][k])
                  for k in d["shapes"]}
        return cls(d["kind"], d["task"], params, d.get("telemetry", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def mlp_hidden_size(p: int) -> int:
    return 2 ** (int(np.log2(p)) + 2)


def init_params(kind: str, p: int, rng) -> dict[str, np.ndarray]:
    if kind in ("linear", "logistic"):
        return {"coef": np.zeros(p), "intercept": np.zeros(())}
    h = mlp_hidden_size(p)
    out = {}
    for i, (fan_in, fan_out) in enumerate([(p, h), (h, h), (h, 1)], start=1):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        out[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        out[f"b{i}"] = np.zeros(fan_out)
    return out


def _default_task(kind: str) -> str:
    return "classification" if kind == "logistic" else "regression"


# -- forward / backward ---------------------------------------------------------------

def forward(params: dict, X: np.ndarray, masks=None):
    """Network output and the cache needed by :func:`backward`.

    ``masks`` are the two inverted-dropout masks of the MLP hidden layers (entries 0 or
    ``1/(1-p)``); ``None`` disables dropout.
    """
    if "coef" in params:
        return X @ params["coef"] + params["intercept"], (X,)
    a1 = np.tanh(X @ params["W1"] + params["b1"])
    d1 = a1 if masks is None else a1 * masks[0]
    a2 = np.tanh(d1 @ params["W2"] + params["b2"])
    d2 = a2 if masks is None else a2 * masks[1]
    out = d2 @ params["W3"][:, 0] + params["b3"][0]
    return out, (X, a1, d1, a2, d2, masks)


def backward(params: dict, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    if "coef" in params:
        (X,) = cache
        return {"coef": X.T @ dout, "intercept": np.asarray(dout.sum())}
    X, a1, d1, a2, d2, masks = cache
    g = {"W3": d2.T @ dout[:, None], "b3": np.array([dout.sum()])}
    dz = np.outer(dout, params["W3"][:, 0])
    if masks is not None:
        dz = dz * masks[1]
    dz = dz * (1 - a2 * a2)
    g["W2"] = d1.T @ dz
    g["b2"] = dz.sum(axis=0)
    dz = dz @ params["W2"].T
    if masks is not None:
        dz = dz * masks[0]
    dz = dz * (1 - a1 * a1)
    g["W1"] = X.T @ dz
    g["b1"] = dz.sum(axis=0)
    return g


def predict(model: ModelParams, X) -> np.ndarray:
    """Regression outputs or classification logits; dropout is off."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got shape {X.shape}")
    return forward(model.params, X)[0]


def classify(model: ModelParams, X) -> np.ndarray:
    # logit exactly 0 goes to class 0
    return (predict(model, X) > 0).astype(int)


# -- losses ----------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def pointwise_loss(f, y, loss_kind: str):
    """Per-sample loss with first and second derivatives in ``f``."""
    if loss_kind == "mse":
        r = f - y
        return r * r, 2 * r, np.full_like(f, 2.0)
    if loss_kind == "bce":
        s = _sigmoid(f)
        loss = np.logaddexp(0.0, f) - y * f
        return loss, s - y, s * (1 - s)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def irmv1_penalty(f, y, loss_kind: str) -> float:
    """Squared derivative of the mean loss of ``scale * f`` at ``scale = 1``."""
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    if f.shape != y.shape:
        raise ValueError("outputs and targets differ in length")
    if f.size == 0:
        raise ValueError("empty environment")
    _, d1, _ = pointwise_loss(f, y, loss_kind)
    g = np.mean(f * d1)
    return float(g * g)


def _irm_terms(f, y, loss_kind):
    n = f.shape[0]
    _, d1, d2 = pointwise_loss(f, y, loss_kind)
    g = np.mean(f * d1)
    return g * g, 2 * g * (d1 + f * d2) / n


# -- training --------------------------------------------------------------------------

def _check_envs(env_data, kind: str, task: str | None):
    if not env_data:
        raise ValueError("need at least one environment")
    envs = []
    p = None
    for X, y in env_data:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("each environment needs X (n, p) and y (n,)")
        if X.shape[0] == 0:
            raise ValueError("empty environment")
        if p is None:
            p = X.shape[1]
        elif X.shape[1] != p:
            raise ValueError("environments disagree on the number of features")
        envs.append((X, y))
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    task = task or _default_task(kind)
    if kind == "linear" and task != "regression" or kind == "logistic" and task != "classification":
        raise ValueError(f"kind {kind!r} does not support task {task!r}")
    if task == "classification":
        for _, y in envs:
            if not np.all((y == 0) | (y == 1)):
                raise ValueError("classification targets must be binary {0, 1}")
    return envs, task


class _Adam:
    def __init__(self, cfg: TrainConfig, params: dict):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1 - c.adam_beta1 ** self.t
        b2t = 1 - c.adam_beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = c.adam_beta1 * self.m[k] + (1 - c.adam_beta1) * g
            self.v[k] = c.adam_beta2 * self.v[k] + (1 - c.adam_beta2) * g * g
            params[k] = params[k] - c.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.adam_eps)


def _is_weight(name: str) -> bool:
    return name == "coef" or name.startswith("W")


def objective_and_grad(params: dict, envs, loss_kind: str, method: str, beta: float,
                       l2: float, masks=None):
    """Training objective and its parameter gradient.

    The risk term is the pooled mean loss over all samples, so ``beta = 0`` reduces every
    method to ERM. ``irm`` adds ``beta * sum_e penalty_e``; ``vrex`` adds
    ``beta * Var_e(R_e)`` (population variance over environments).
    """
    X = np.concatenate([e[0] for e in envs]) if len(envs) > 1 else envs[0][0]
    y = np.concatenate([e[1] for e in envs]) if len(envs) > 1 else envs[0][1]
    N = X.shape[0]
    out, cache = forward(params, X, masks)
    loss, d1, _ = pointwise_loss(out, y, loss_kind)
    obj = float(loss.mean())
    dout = d1 / N

    if beta > 0 and method != "erm":
        bounds = np.cumsum([0] + [e[0].shape[0] for e in envs])
        sl = [slice(bounds[i], bounds[i + 1]) for i in range(len(envs))]
        if method == "irm":
            for s in sl:
                pen, dpen = _irm_terms(out[s], y[s], loss_kind)
                obj += beta * pen
                dout[s] += beta * dpen
        elif method == "vrex":
            risks = np.array([loss[s].mean() for s in sl])
            dev = risks - risks.mean()
            obj += beta * float(np.mean(dev * dev))
            E = len(sl)
            for i, s in enumerate(sl):
                # d Var / d R_i = 2 dev_i / E
                dout[s] += beta * (2 * dev[i] / E) * d1[s] / (s.stop - s.start)
        else:
            raise ValueError(f"unknown method {method!r}")

    grads = backward(params, cache, dout)
    for k, v in params.items():
        if _is_weight(k) and l2 > 0:
            obj += l2 * float(np.sum(v * v))
            grads[k] = grads[k] + 2 * l2 * v
    return obj, grads


def _error(model: ModelParams, X, y) -> float:
    out = predict(model, X)
    if model.task == "classification":
        return float(np.mean((out > 0).astype(int) != y))
    return float(np.mean((out - y) ** 2))


def _fit(env_data, kind: str, cfg: TrainConfig, method: str, task: str | None = None,
         val_data=None) -> ModelParams:
    envs, task = _check_envs(env_data, kind, task)
    loss_kind = "mse" if task == "regression" else "bce"
    rng = np.random.default_rng(cfg.seed)
    p = envs[0][0].shape[1]
    params = init_params(kind, p, rng)
    model = ModelParams(kind, task, params)
    opt = _Adam(cfg, params)
    N = sum(e[0].shape[0] for e in envs)
    use_dropout = kind == "mlp" and cfg.dropout_p > 0
    keep = 1.0 - cfg.dropout_p

    trace = []
    best = None
    if val_data is not None:
        Xv, yv = np.asarray(val_data[0], float), np.asarray(val_data[1], float).ravel()
    for it in range(cfg.n_iter):
        masks = None
        if use_dropout:
            h = params["W1"].shape[1]
            masks = tuple((rng.random((N, h)) < keep) / keep for _ in range(2))
        beta = cfg.beta if it >= cfg.warmup else 0.0
        obj, grads = objective_and_grad(params, envs, loss_kind, method, beta, cfg.l2, masks)
        if not np.isfinite(obj):
            raise DivergenceError(it)
        opt.step(params, grads)
        done = it + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.n_iter:
            trace.append(obj)
            if val_data is not None:
                err = _error(model, Xv, yv)
                # keep the earliest best checkpoint
                if best is None or err < best[0]:
                    best = (err, done, {k: v.copy() for k, v in params.items()})
    model.telemetry = {"method": method, "iterations": cfg.n_iter, "objective_trace": trace}
    if best is not None:
        model.params = best[2]
        model.telemetry.update(best_iteration=best[1], best_val_error=best[0])
    return model


def _fit_linear_closed_form(envs, l2: float) -> ModelParams | None:
    X = np.concatenate([e[0] for e in envs])
    y = np.concatenate([e[1] for e in envs])
    mx, my = X.mean(axis=0), y.mean()
    Xc = X - mx
    A = Xc.T @ Xc / X.shape[0] + l2 * np.eye(X.shape[1])
    if np.linalg.cond(A) > 1e12:
        return None
    try:
        coef = np.linalg.solve(A, Xc.T @ (y - my) / X.shape[0])
    except np.linalg.LinAlgError:
        return None
    return ModelParams("linear", "regression", {"coef": coef, "intercept": np.asarray(my - mx @ coef)},
                       {"method": "erm", "closed_form": True})


def fit_erm(env_data, kind: str, cfg: TrainConfig, task: str | None = None,
            val_data=None) -> ModelParams:
    """Pooled empirical risk minimisation with an L2 term on weights.

    ``cfg.closed_form`` solves the (ridge) normal equations for ``linear`` models and
    falls back to Adam when they are singular.
    """
    if cfg.closed_form and kind == "linear":
        envs, _ = _check_envs(env_data, kind, task)
        model = _fit_linear_closed_form(envs, cfg.l2)
        if model is not None:
            return model
    return _fit(env_data, kind, cfg, "erm", task, val_data)


def fit_irmv1(env_data, kind: str, cfg: TrainConfig, task: str | None = None,
              val_data=None) -> ModelParams:
    return _fit(env_data, kind, cfg, "irm", task, val_data)


def fit_vrex(env_data, kind: str, cfg: TrainConfig, task: str | None = None,
             val_data=None) -> ModelParams:
    return _fit(env_data, kind, cfg, "vrex", task, val_data)


FITTERS = {"erm": fit_erm, "irm": fit_irmv1, "vrex": fit_vrex}
