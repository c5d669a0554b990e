"""Metrics and report containers."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelParams, predict


def coef_mse(fitted, truth) -> float:
    fitted = np.asarray(fitted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if fitted.shape != truth.shape:
        raise ValueError(f"length mismatch: {fitted.shape} vs {truth.shape}")
    return float(np.mean((fitted - truth) ** 2))


def error_rate(model: ModelParams, X, y) -> float:
    """0-1 error of a classifier; ``y`` may be coded {0, 1} or {-1, +1}."""
    pred = predict(model, X) > 0
    return float(np.mean(pred != (np.asarray(y) > 0)))


def _env_error(args):
    model, factory, sub_seed = args
    X, y = factory(sub_seed)
    return error_rate(model, X, y)


def env_errors(model: ModelParams, test_env_factory, n_envs: int, seed: int = 0,
               n_jobs: int = 1) -> np.ndarray:
    """Error on each of ``n_envs`` freshly generated environments.

    Environment ``i`` is drawn with sub-seed ``(seed, i)``, so the result does not depend on
    ``n_jobs``. Environments are generated, scored and dropped one at a time.
    """
    if model.task != "classification":
        raise ValueError("worst-case error needs a classification model")
    if n_envs < 1:
        raise ValueError("n_envs must be >= 1")
    jobs = ((model, test_env_factory, (seed, i)) for i in range(n_envs))
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            return np.array(list(ex.map(_env_error, jobs, chunksize=32)))
    return np.array([_env_error(j) for j in jobs])


def worst_case_error(model: ModelParams, test_env_factory, n_envs: int, seed: int = 0,
                     n_jobs: int = 1) -> float:
    return float(env_errors(model, test_env_factory, n_envs, seed, n_jobs).max())


def task_set_summary(per_task_errors) -> tuple[float, float, float]:
    """Average, worst and population standard deviation of per-task errors."""
    e = np.asarray(per_task_errors, dtype=float)
    if e.size == 0:
        raise ValueError("no task errors to summarise")
    return float(e.mean()), float(e.max()), float(e.std())


@dataclass
class ExperimentReport:
    method: str
    per_trial: dict[str, list[float]]
    cell: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    @property
    def n_trials(self) -> int:
        return max((len(v) for v in self.per_trial.values()), default=0)

    @property
    def metrics(self) -> dict[str, tuple[float, float | None]]:
        """Metric name to ``(mean, population std)``; std is ``None`` below two trials."""
        out = {}
        for name, vals in self.per_trial.items():
            v = np.asarray(vals, dtype=float)
            out[name] = (float(v.mean()), float(v.std()) if v.size >= 2 else None)
        return out

    def mean(self, metric: str) -> float:
        return self.metrics[metric][0]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "cell": self.cell,
            "n_trials": self.n_trials,
            "metrics": {k: {"mean": m, "std": s} for k, (m, s) in self.metrics.items()},
            "per_trial": self.per_trial,
            "config_echo": self.config_echo,
        }


def csv_rows(reports: list[ExperimentReport]) -> list[dict]:
    cell_keys = sorted({k for r in reports for k in r.cell})
    rows = []
    for r in reports:
        for name, (m, s) in r.metrics.items():
            row = {k: r.cell.get(k, "") for k in cell_keys}
            row.update(method=r.method, metric=name, mean=m, std="" if s is None else s,
                       n_trials=r.n_trials)
            rows.append(row)
    return rows


def write_reports(reports: list[ExperimentReport], out_dir, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / f"{stem}.json"
    cpath = out_dir / f"{stem}.csv"
    jpath.write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    rows = csv_rows(reports)
    with cpath.open("w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return jpath, cpath
