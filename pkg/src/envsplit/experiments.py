"""Experiment suites: the linear IRM example, the SEM worst-case study, the toy dump and CSV task sets.

Every random draw is keyed off the master seed through :func:`sub_seed`, with keys naming
the suite, cell, trial and stage. Adding or removing a method leaves every other
method's draws unchanged, and results do not depend on worker count or ordering.
"""
from __future__ import annotations

import itertools
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np
import yaml

from .baselines import EiilConfig, eiil_partition, kmeans_partition, random_partition
from .datagen import (IrmExampleConfig, SemConfig, biased_resample, gen_irm_example, gen_sem,
                      gen_toy_2d)
from .decorr import DecorrConfig, decorr_partition
from .evaluate import ExperimentReport, coef_mse, env_errors, error_rate, task_set_summary, write_reports
from .io import CsvSchema, Dataset, load_dataset
from .models import ModelParams, TrainConfig, fit_erm, fit_irmv1, fit_vrex, predict
from .numerics import weighted_correlation

log = logging.getLogger(__name__)

METHODS = ("erm", "random+irm", "eiil", "kmeans+irm", "decorr+irm", "irm_oracle", "vrex")
SUITES = ("irm_example", "risks_of_irm", "toy_dump", "csv_tasks")
TASK_SETS = ("three_train", "one_train", "biased")


class ConfigError(ValueError):
    """Invalid suite configuration; ``key`` names the offending top-level key when known."""

    def __init__(self, msg: str, key: str | None = None):
        super().__init__(msg)
        self.key = key


def sub_seed(master: int, *keys) -> int:
    """Deterministic 32-bit seed from a master seed and a tuple of int/str keys."""
    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return int(np.random.SeedSequence([int(master), *words]).generate_state(1)[0])


# -- configuration -----------------------------------------------------------------------

_SUITE_DEFAULTS = {
    "irm_example": {
        "methods": ["erm", "random+irm", "eiil", "kmeans+irm", "decorr+irm", "irm_oracle"],
        "env_counts": [2, 3],
        "train": {"beta": 10.0, "n_iter": 8000, "warmup": 4000},
    },
    "risks_of_irm": {
        "methods": ["erm", "random+irm", "eiil", "kmeans+irm", "decorr+irm", "irm_oracle"],
        "env_counts": [2, 3, 4, 5, 6, 7, 8],
        "train": {"beta": 1e4, "n_iter": 4000, "warmup": 2000},
    },
    "toy_dump": {
        "methods": ["random+irm", "eiil", "kmeans+irm", "decorr+irm"],
        "env_counts": [2],
        "train": {},
    },
    "csv_tasks": {
        "methods": list(METHODS),
        "env_counts": [2],
        "train": {"beta": 1e4, "n_iter": 2000, "warmup": 100},
    },
}

_FULL_SCALE = {"trials": 10, "test_envs": 5000}


@dataclass
class SuiteConfig:
    suite: str
    methods: list[str] | None = None
    trials: int = 5
    seed: int = 0
    dims: list[int] = field(default_factory=lambda: [2, 5, 10, 20])
    env_counts: list[int] | None = None
    test_envs: int = 500
    output: str | None = None
    n_jobs: int = 1
    full_scale: bool = False
    train: dict = field(default_factory=dict)
    decorr: dict = field(default_factory=dict)
    eiil: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}; valid suites: {', '.join(SUITES)}", "suite")
        defaults = _SUITE_DEFAULTS[self.suite]
        if self.methods is None:
            self.methods = list(defaults["methods"])
        if not self.methods:
            raise ConfigError("method list is empty", "methods")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; valid methods: {', '.join(METHODS)}", "methods")
        if self.env_counts is None:
            self.env_counts = list(defaults["env_counts"])
        if self.full_scale:
            self.trials = max(self.trials, _FULL_SCALE["trials"])
            self.test_envs = max(self.test_envs, _FULL_SCALE["test_envs"])
            if self.suite == "csv_tasks":
                self.train.setdefault("n_iter", 20000)
        if self.trials < 1:
            raise ConfigError("trials must be >= 1", "trials")
        self.train = {**defaults["train"], **self.train}
        # fail early on bad nested keys
        self.train_config(0)
        self.decorr_config(2, 0)
        self.eiil_config(0)

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train section: {exc}", "train") from None

    def decorr_config(self, k: int, seed: int) -> DecorrConfig:
        try:
            return DecorrConfig(**{**self.decorr, "k": k, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"decorr section: {exc}", "decorr") from None

    def eiil_config(self, seed: int) -> EiilConfig:
        try:
            return EiilConfig(**{**self.eiil, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"eiil section: {exc}", "eiil") from None

    def echo(self) -> dict:
        """Fully resolved configuration, nested defaults included."""
        d = asdict(self)
        d["train"] = self.train_config(0).to_dict()
        d["train"].pop("seed")
        d["decorr"] = {k: v for k, v in self.decorr_config(2, 0).to_dict().items() if k not in ("k", "seed")}
        d["eiil"] = {k: v for k, v in self.eiil_config(0).to_dict().items() if k != "seed"}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        if not isinstance(d, dict):
            raise ConfigError("suite config must be a mapping")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}", sorted(unknown)[0])
        if "suite" not in d:
            raise ConfigError("config is missing the 'suite' key")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        text = Path(path).read_text()
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{path}:{mark.line + 1}" if mark else str(path)
            raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from None
        lines = {}
        if isinstance(node, yaml.MappingNode):
            lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}
        try:
            return cls.from_dict(data)
        except ConfigError as exc:
            where = f"{path}:{lines[exc.key]}" if exc.key in lines else str(path)
            raise ConfigError(f"{where}: {exc}", exc.key) from None


# -- method dispatch ----------------------------------------------------------------------

def _pool(envs):
    X = np.vstack([e[0] for e in envs])
    y = np.concatenate([e[1] for e in envs])
    return X, y


def make_partition(method: str, X, y, k: int, cfg: SuiteConfig, seed: int, kind: str,
                   task: str | None = None, train_cfg: TrainConfig | None = None):
    if method == "random+irm":
        return random_partition(X.shape[0], k, seed)
    if method == "kmeans+irm":
        return kmeans_partition(X, k, seed)
    if method == "decorr+irm":
        return decorr_partition(X, cfg.decorr_config(k, seed))
    if method == "eiil":
        ref = fit_erm([(X, y)], kind, train_cfg or cfg.train_config(seed), task)
        return eiil_partition(X, y, cfg.eiil_config(seed), ref)
    raise ValueError(f"{method!r} is not a partitioning method")


def fit_method(method: str, envs, kind: str, cfg: SuiteConfig, k: int, train_seed: int,
               part_seed: int, task: str | None = None, val_data=None) -> ModelParams:
    """Train one method on natural training environments ``envs``.

    ``irm_oracle`` and ``vrex`` use ``envs`` as given; partitioning methods pool them first
    and split into ``k`` inferred environments.
    """
    tcfg = cfg.train_config(train_seed)
    if method == "erm":
        return fit_erm([_pool(envs)], kind, tcfg, task, val_data)
    if method == "irm_oracle":
        return fit_irmv1(envs, kind, tcfg, task, val_data)
    if method == "vrex":
        return fit_vrex(envs, kind, tcfg, task, val_data)
    X, y = _pool(envs)
    part = make_partition(method, X, y, k, cfg, part_seed, kind, task, tcfg)
    return fit_irmv1(part.split(X, y), kind, tcfg, task, val_data)


def _map(fn, jobs, n_jobs: int):
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def _collect(results, cfg: SuiteConfig, cell_keys) -> list[ExperimentReport]:
    """Group ``(cell, method, metrics)`` rows into one report per (cell, method), trial order kept."""
    grouped: dict = {}
    for cell, method, metrics in results:
        key = (tuple(cell[k] for k in cell_keys), method)
        rep = grouped.setdefault(key, ExperimentReport(method, {}, dict(cell), cfg.echo()))
        for name, v in metrics.items():
            rep.per_trial.setdefault(name, []).append(float(v))
    return list(grouped.values())


# -- linear IRM example -----------------------------------------------------------------

def _irm_example_job(args):
    cfg, n_envs, d, trial = args
    data_seed = sub_seed(cfg.seed, "irm_example", n_envs, d, trial, "data")
    sigmas = (0.1, 1.5, 2.0)[:n_envs]
    data = gen_irm_example(IrmExampleConfig(d=d, sigmas=sigmas, seed=data_seed,
                                            **cfg.data.get("irm_example", {})))
    train_seed = sub_seed(cfg.seed, "irm_example", n_envs, d, trial, "train")
    out = []
    for method in cfg.methods:
        if method == "vrex":
            continue
        part_seed = sub_seed(cfg.seed, "irm_example", n_envs, d, trial, method)
        model = fit_method(method, data.envs, "linear", cfg, n_envs, train_seed, part_seed)
        out.append(({"n_envs": n_envs, "d": d}, method,
                     {"coef_mse": coef_mse(model.coef, data.beta_star)}))
    return out


def run_irm_example_suite(cfg: SuiteConfig) -> list[ExperimentReport]:
    jobs = [(cfg, e, d, t) for e in cfg.env_counts for d in cfg.dims for t in range(cfg.trials)]
    rows = [r for res in _map(_irm_example_job, jobs, cfg.n_jobs) for r in res]
    return _collect(rows, cfg, ("n_envs", "d"))


# -- SEM worst-case study -----------------------------------------------------------------

def _risks_job(args):
    cfg, E, trial = args
    data_seed = sub_seed(cfg.seed, "risks_of_irm", E, trial, "data")
    sem = gen_sem(SemConfig(E=E, seed=data_seed, **cfg.data.get("sem", {})))
    envs = [(X, (y > 0).astype(float)) for X, y in sem.train_envs]
    train_seed = sub_seed(cfg.seed, "risks_of_irm", E, trial, "train")
    test_seed = sub_seed(cfg.seed, "risks_of_irm", E, trial, "test")
    out = []
    for method in cfg.methods:
        part_seed = sub_seed(cfg.seed, "risks_of_irm", E, trial, method)
        model = fit_method(method, envs, "logistic", cfg, E, train_seed, part_seed)
        errs = env_errors(model, sem.test_env_factory, cfg.test_envs, test_seed)
        out.append(({"E": E}, method, {"worst_case_error": errs.max(), "mean_error": errs.mean()}))
    return out


def run_risks_suite(cfg: SuiteConfig) -> list[ExperimentReport]:
    jobs = [(cfg, E, t) for E in cfg.env_counts for t in range(cfg.trials)]
    rows = [r for res in _map(_risks_job, jobs, cfg.n_jobs) for r in res]
    return _collect(rows, cfg, ("E",))


# -- toy partition dump --------------------------------------------------------------------

def run_toy_dump(cfg: SuiteConfig) -> list[ExperimentReport]:
    """Partition the 2-d toy set with each method; per-point CSVs go to ``cfg.output``."""
    n = int(cfg.data.get("n", 1000))
    rows = []
    for trial in range(cfg.trials):
        X, y = gen_toy_2d(n, sub_seed(cfg.seed, "toy_dump", trial, "data"))
        for method in cfg.methods:
            if method in ("erm", "irm_oracle", "vrex"):
                continue
            part = make_partition(method, X, y, 2, cfg, sub_seed(cfg.seed, "toy_dump", trial, method),
                                  "linear", train_cfg=cfg.train_config(0))
            corrs = [weighted_correlation(X[idx])[0, 1] for idx in part.groups()]
            rows.append(({}, method, {"corr_env0": corrs[0], "corr_env1": corrs[1],
                                      "corr_gap": abs(corrs[0] - corrs[1])}))
            if cfg.output and trial == 0:
                out = Path(cfg.output)
                out.mkdir(parents=True, exist_ok=True)
                name = method.replace("+irm", "")
                lines = ["x0,x1,env_id"] + [f"{a:.17g},{b:.17g},{e}" for (a, b), e in
                                            zip(X, part.assignments)]
                (out / f"toy_{name}.csv").write_text("\n".join(lines) + "\n")
    return _collect(rows, cfg, ())


# -- CSV task sets -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def enumerate_tasks(n_envs: int, task_set: str) -> list[Task]:
    """``three_train``: 3 train, 1 validation, 1 test; ``one_train``: 1 train, 1 validation, rest test."""
    envs = range(n_envs)
    tasks = []
    if task_set == "three_train":
        for train in itertools.combinations(envs, 3):
            rest = [e for e in envs if e not in train]
            for val in rest:
                tasks.append(Task(train, (val,), tuple(e for e in rest if e != val)))
    elif task_set == "one_train":
        for tr, val in itertools.permutations(envs, 2):
            tasks.append(Task((tr,), (val,), tuple(e for e in envs if e not in (tr, val))))
    else:
        raise ConfigError(f"unknown task set {task_set!r}; valid: three_train, one_train, biased")
    return tasks


def _task_error(model: ModelParams, X, y) -> float:
    if model.task == "classification":
        return error_rate(model, X, y)
    return float(np.mean((predict(model, X) - y) ** 2))


def _csv_task_job(args):
    cfg, ds, task_set, kind, task_kind, k, trial, t_idx, task = args
    envs = [(ds.X[ds.env == e], ds.y[ds.env == e]) for e in task.train]
    vmask = np.isin(ds.env, task.val)
    tmask = np.isin(ds.env, task.test)
    out = []
    for method in cfg.methods:
        if method in ("irm_oracle", "vrex") and len(envs) < 2:
            continue
        train_seed = sub_seed(cfg.seed, "csv_tasks", trial, t_idx, "train")
        part_seed = sub_seed(cfg.seed, "csv_tasks", trial, t_idx, method)
        model = fit_method(method, envs, kind, cfg, k, train_seed, part_seed, task_kind,
                           (ds.X[vmask], ds.y[vmask]))
        out.append((trial, t_idx, method, _task_error(model, ds.X[tmask], ds.y[tmask])))
    return out


def _biased_job(args):
    cfg, ds, kind, k, trial, alpha, bias_column = args
    rs = sub_seed(cfg.seed, "biased", trial, repr(alpha), "split")
    (Xtr, ytr), (Xte, yte), _ = biased_resample(ds.X, ds.y, bias_column, alpha, rs)
    rng = np.random.default_rng(sub_seed(cfg.seed, "biased", trial, repr(alpha), "val"))
    val = np.zeros(Xtr.shape[0], dtype=bool)
    val[rng.permutation(Xtr.shape[0])[: max(1, Xtr.shape[0] // 10)]] = True
    Xfit, yfit = Xtr[~val], ytr[~val]
    groups = [Xfit[:, bias_column] == b for b in (0, 1)]
    envs = [(Xfit[g], yfit[g]) for g in groups]
    out = []
    for method in cfg.methods:
        train_seed = sub_seed(cfg.seed, "biased", trial, repr(alpha), "train")
        part_seed = sub_seed(cfg.seed, "biased", trial, repr(alpha), method)
        model = fit_method(method, envs, kind, cfg, k, train_seed, part_seed, "classification",
                           (Xtr[val], ytr[val]))
        out.append(({"alpha": alpha}, method, {"test_error": error_rate(model, Xte, yte)}))
    return out


def load_task_dataset(cfg: SuiteConfig) -> Dataset:
    data = cfg.data
    if "path" not in data or "target" not in data:
        raise ConfigError("csv_tasks needs data.path and data.target")
    schema = CsvSchema(target=data["target"], features=data.get("features"),
                       env_column=data.get("env_column"), standardize=data.get("standardize", True))
    ds = load_dataset(data["path"], schema)
    if schema.standardize:
        keep = [j for j in range(ds.X.shape[1]) if j != data.get("bias_column")]
        Xs = ds.X.copy()
        mu, sd = Xs[:, keep].mean(axis=0), Xs[:, keep].std(axis=0)
        sd[sd == 0] = 1.0
        Xs[:, keep] = (Xs[:, keep] - mu) / sd
        ds = replace(ds, X=Xs)
    return ds


def run_csv_tasks(cfg: SuiteConfig, dataset: Dataset | None = None) -> list[ExperimentReport]:
    """Task-set evaluation with validation early stopping.

    ``cfg.data`` keys: ``path``, ``target``, ``env_column``, ``features``, ``task_set``
    (``three_train`` | ``one_train`` | ``biased``), ``model`` (``mlp`` | ``logistic`` |
    ``linear``), ``task`` (``classification`` | ``regression``), ``k``; for ``biased``:
    ``bias_column`` (feature index) and ``alphas``.
    """
    data = cfg.data
    ds = dataset if dataset is not None else load_task_dataset(cfg)
    task_set = data.get("task_set", "three_train")
    kind = data.get("model", "mlp")
    task_kind = data.get("task", "regression" if kind == "linear" else "classification")
    k = int(data.get("k", cfg.env_counts[0]))
    if task_kind == "classification" and not np.all(np.isin(ds.y, (0, 1))):
        raise ConfigError("classification tasks need a binary {0, 1} target")

    if task_set == "biased":
        if "bias_column" not in data:
            raise ConfigError("biased task set needs data.bias_column")
        alphas = [float(a) for a in data.get("alphas", [0.01, 0.1, 0.5, 0.9])]
        jobs = [(cfg, ds, kind, k, t, a, int(data["bias_column"])) for t in range(cfg.trials) for a in alphas]
        rows = [r for res in _map(_biased_job, jobs, cfg.n_jobs) for r in res]
        return _collect(rows, cfg, ("alpha",))

    if ds.env is None:
        raise ConfigError("three_train/one_train task sets need data.env_column")
    tasks = enumerate_tasks(len(ds.env_levels), task_set)
    jobs = [(cfg, ds, task_set, kind, task_kind, k, t, i, task)
            for t in range(cfg.trials) for i, task in enumerate(tasks)]
    errs: dict = {}
    for res in _map(_csv_task_job, jobs, cfg.n_jobs):
        for trial, t_idx, method, e in res:
            errs.setdefault(method, {}).setdefault(trial, {})[t_idx] = e
    rows = []
    for method in cfg.methods:
        for trial in range(cfg.trials):
            per_task = errs.get(method, {}).get(trial)
            if not per_task:
                continue
            vals = [per_task[i] for i in sorted(per_task)]
            avg, worst, std = task_set_summary(vals)
            rows.append(({"task_set": task_set, "n_tasks": len(vals)}, method,
                         {"avg_error": avg, "worst_error": worst, "std_error": std}))
    return _collect(rows, cfg, ("task_set", "n_tasks"))


RUNNERS = {
    "irm_example": run_irm_example_suite,
    "risks_of_irm": run_risks_suite,
    "toy_dump": run_toy_dump,
    "csv_tasks": run_csv_tasks,
}


def run_suite(cfg: SuiteConfig) -> list[ExperimentReport]:
    reports = RUNNERS[cfg.suite](cfg)
    if cfg.output:
        write_reports(reports, cfg.output, stem=cfg.suite)
    return reports


def summary_table(reports: list[ExperimentReport]) -> str:
    lines = []
    for r in reports:
        cell = " ".join(f"{k}={v}" for k, v in r.cell.items())
        for name, (m, s) in r.metrics.items():
            sd = "" if s is None else f" ({s:.4f})"
            lines.append(f"{cell:<24} {r.method:<12} {name:<18} {m:.4f}{sd}")
    return "\n".join(lines)
