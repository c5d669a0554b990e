"""CSV ingestion and export."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import pandas as pd
import yaml


class SchemaError(ValueError):
    pass


@dataclass
class CsvSchema:
    target: str
    features: list[str] | None = None
    env_column: str | None = None
    standardize: bool = True

    @classmethod
    def load(cls, path) -> "CsvSchema":
        data = yaml.safe_load(Path(path).read_text())
        if not isinstance(data, dict) or "target" not in data:
            raise SchemaError(f"{path}: schema must be a mapping with a 'target' key")
        unknown = set(data) - {"target", "features", "env_column", "standardize"}
        if unknown:
            raise SchemaError(f"{path}: unknown schema keys {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    env: np.ndarray | None = None
    env_levels: list | None = None


def _encode(col: pd.Series, name: str) -> np.ndarray:
    if pd.api.types.is_bool_dtype(col):
        return col.to_numpy().astype(float)
    if pd.api.types.is_numeric_dtype(col):
        return col.to_numpy(dtype=float)
    levels = sorted(col.astype(str).unique())
    if len(levels) != 2:
        raise SchemaError(f"column {name!r}: non-numeric with {len(levels)} levels "
                          f"({levels[:5]}); only two-level columns are encoded")
    return (col.astype(str) == levels[1]).to_numpy(dtype=float)


def read_frame(path) -> pd.DataFrame:
    df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    missing = df.isna()
    if missing.to_numpy().any():
        r, c = np.argwhere(missing.to_numpy())[0]
        # +2: header line and 1-based numbering
        raise SchemaError(f"{path}: missing value at line {r + 2}, column {df.columns[c]!r}")
    return df


def load_dataset(path, schema: CsvSchema) -> Dataset:
    df = read_frame(path)
    cols = list(df.columns)
    if schema.target not in cols:
        raise SchemaError(f"{path}: target column {schema.target!r} not found (columns: {cols})")
    if schema.env_column is not None and schema.env_column not in cols:
        raise SchemaError(f"{path}: environment column {schema.env_column!r} not found")
    if schema.features is None:
        skip = {schema.target, schema.env_column}
        features = [c for c in cols if c not in skip
                    and (pd.api.types.is_numeric_dtype(df[c]) or df[c].nunique() == 2)]
    else:
        features = list(schema.features)
        absent = [c for c in features if c not in cols]
        if absent:
            raise SchemaError(f"{path}: feature columns {absent} not found")
    if not features:
        raise SchemaError(f"{path}: no feature columns")
    X = np.column_stack([_encode(df[c], c) for c in features])
    y = _encode(df[schema.target], schema.target)
    env = levels = None
    if schema.env_column is not None:
        levels = sorted(df[schema.env_column].unique().tolist())
        env = np.searchsorted(np.asarray(levels), df[schema.env_column].to_numpy())
    return Dataset(X, y, features, env, levels)


def write_csv(path, X, y, feature_names=None, env=None, target: str = "y",
              env_column: str = "env") -> None:
    """Write a dataset with full float precision so it re-reads bit-for-bit."""
    X = np.asarray(X, dtype=float)
    names = feature_names or [f"x{i}" for i in range(X.shape[1])]
    df = pd.DataFrame(X, columns=names)
    df[target] = np.asarray(y)
    if env is not None:
        df[env_column] = np.asarray(env)
    df.to_csv(path, index=False, float_format="%.17g")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
