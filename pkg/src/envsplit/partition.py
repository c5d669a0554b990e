from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass
class Partition:
    """Disjoint assignment of sample indices to ``k`` environments."""

    assignments: np.ndarray
    k: int
    objective_trace: list[float] = field(default_factory=list)
    seed: int | None = None
    method: str = ""

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=int)

    @property
    def n(self) -> int:
        return int(self.assignments.shape[0])

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    def indices(self, env: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == env)

    def groups(self) -> list[np.ndarray]:
        return [self.indices(e) for e in range(self.k)]

    def split(self, X, y=None) -> list[tuple]:
        """Slice ``(X, y)`` into per-environment pairs."""
        X = np.asarray(X)
        out = []
        for idx in self.groups():
            out.append((X[idx], None if y is None else np.asarray(y)[idx]))
        return out

    def validate(self, n: int | None = None) -> None:
        a = self.assignments
        if a.ndim != 1:
            raise PartitionError("assignments must be one-dimensional")
        if n is not None and a.shape[0] != n:
            raise PartitionError(f"partition covers {a.shape[0]} rows, data has {n}")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise PartitionError(f"environment ids must lie in [0, {self.k})")
        empty = np.flatnonzero(self.sizes == 0)
        if empty.size:
            raise PartitionError(f"empty environments: {empty.tolist()}")

    def to_dict(self) -> dict:
        return {
            "k": int(self.k),
            "assignments": self.assignments.tolist(),
            "objective_trace": [float(v) for v in self.objective_trace],
            "seed": None if self.seed is None else int(self.seed),
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        return cls(assignments=np.asarray(d["assignments"], dtype=int), k=int(d["k"]),
                   objective_trace=list(d.get("objective_trace", [])),
                   seed=d.get("seed"), method=d.get("method", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Partition":
        return cls.from_dict(json.loads(Path(path).read_text()))


def single_environment(n: int, **kw) -> Partition:
    return Partition(np.zeros(n, dtype=int), k=1, **kw)


def fill_environment(chosen: np.ndarray, weights: np.ndarray, n_left_envs: int, rng,
                     max_resample: int = 10) -> np.ndarray:
    """Boolean mask of points taken into the next environment.

    ``chosen`` is a first Bernoulli draw. A draw is rejected when it is empty or would
    leave fewer than ``n_left_envs`` points behind; up to ``max_resample`` redraws follow,
    then the ``ceil(m / (n_left_envs + 1))`` highest-weight points are taken.
    """
    m = weights.shape[0]

    def ok(mask):
        c = int(mask.sum())
        return c >= 1 and m - c >= n_left_envs

    if ok(chosen):
        return chosen
    for _ in range(max_resample):
        chosen = rng.random(m) < weights
        if ok(chosen):
            return chosen
    take = int(np.ceil(m / (n_left_envs + 1)))
    take = min(max(take, 1), m - n_left_envs)
    order = np.argsort(-weights, kind="stable")
    mask = np.zeros(m, dtype=bool)
    mask[order[:take]] = True
    return mask
