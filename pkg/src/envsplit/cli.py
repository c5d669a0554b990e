"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or divergence error.
"""
from __future__ import annotations

import json
import logging
import secrets
import sys
from pathlib import Path

import click
import numpy as np

from .baselines import EiilConfig, eiil_partition, kmeans_partition, random_partition
from .datagen import (IrmExampleConfig, SemConfig, gen_biased_tabular, gen_irm_example,
                      gen_pseudo_years, gen_sem, gen_toy_2d)
from .decorr import DecorrConfig, decorr_partition
from .experiments import ConfigError, SuiteConfig, run_suite, summary_table
from .io import CsvSchema, Dataset, SchemaError, load_dataset, write_csv, write_json
from .models import FITTERS, DivergenceError, TrainConfig, fit_erm, predict
from .numerics import correlation_score, standardize, weighted_correlation
from .partition import Partition, PartitionError

log = logging.getLogger("envsplit")


class UsageFailure(click.ClickException):
    exit_code = 1


def _seed(ctx: click.Context) -> int:
    seed = ctx.obj.get("seed")
    if seed is None:
        seed = secrets.randbits(31)
        ctx.obj["seed"] = seed
        log.warning("no --seed given; using %d", seed)
    return seed


def _schema(schema_path, target, env_column, standardize_flag) -> CsvSchema:
    if schema_path:
        schema = CsvSchema.load(schema_path)
        if standardize_flag is not None:
            schema.standardize = standardize_flag
        return schema
    if not target:
        raise UsageFailure("either --schema or --target is required")
    return CsvSchema(target=target, env_column=env_column,
                     standardize=True if standardize_flag is None else standardize_flag)


def _features(ds: Dataset, schema: CsvSchema) -> np.ndarray:
    return standardize(ds.X) if schema.standardize else ds.X


def env_diagnostics(X: np.ndarray, part: Partition) -> list[dict]:
    """Unweighted size, d^2(R, I) and correlation matrix of each realised environment."""
    out = []
    for e, idx in enumerate(part.groups()):
        Xe = X[idx]
        if Xe.shape[0] >= 2:
            R = weighted_correlation(Xe).tolist()
            score = correlation_score(Xe)
        else:
            R, score = None, None
        out.append({"env": e, "size": int(idx.size), "corr_dist_sq": score, "correlation": R})
    return out


@click.group()
@click.option("--seed", type=int, default=None, help="Master seed; a random one is logged if omitted.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, seed, verbose):
    """Environment partitioning and invariant learning."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed


_csv_options = [
    click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False)),
    click.option("--schema", "schema_path", type=click.Path(exists=True, dir_okay=False)),
    click.option("--target"),
    click.option("--env-column"),
    click.option("--standardize/--no-standardize", default=None),
]


def csv_options(f):
    for opt in reversed(_csv_options):
        f = opt(f)
    return f


@cli.command()
@csv_options
@click.option("--method", type=click.Choice(["decorr", "kmeans", "random", "eiil"]), default="decorr")
@click.option("--k", "k", type=int, default=2, show_default=True)
@click.option("--p0", type=float, default=0.1, show_default=True)
@click.option("--alpha", type=float, default=0.1, show_default=True)
@click.option("--iters", type=int, default=5000, show_default=True, help="Decorr epochs / EIIL steps.")
@click.option("--lambda", "lam", type=float, default=100.0, show_default=True)
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def partition(ctx, input_path, schema_path, target, env_column, standardize, method, k, p0, alpha,
              iters, lam, output):
    """Split a CSV into environments and write the partition JSON plus diagnostics."""
    seed = _seed(ctx)
    schema = _schema(schema_path, target, env_column, standardize)
    ds = load_dataset(input_path, schema)
    X = _features(ds, schema)
    n = X.shape[0]
    if method == "decorr":
        if n < 2 * k:
            raise UsageFailure(f"decorr needs at least 2k rows (n={n}, k={k})")
        cfg = DecorrConfig(k=k, p0=p0, alpha=alpha, T=iters, lam=lam, seed=seed,
                           standardize=schema.standardize)
        part = decorr_partition(X, cfg)
    elif method == "kmeans":
        if n < k:
            raise UsageFailure(f"k-means needs at least k rows (n={n}, k={k})")
        part = kmeans_partition(X, k, seed, standardize_features=schema.standardize)
    elif method == "random":
        if n < 2 * k:
            raise UsageFailure(f"random partition needs at least 2k rows (n={n}, k={k})")
        part = random_partition(n, k, seed)
    else:
        if k != 2:
            raise UsageFailure("eiil infers exactly two environments; use --k 2")
        task = "classification" if np.all(np.isin(ds.y, (0, 1))) else "regression"
        kind = "logistic" if task == "classification" else "linear"
        ref = fit_erm([(X, ds.y)], kind, TrainConfig(n_iter=2000, seed=seed))
        part = eiil_partition(X, ds.y, EiilConfig(steps=iters, seed=seed), ref)
    part.save(output)
    diag = {"method": method, "k": k, "environments": env_diagnostics(X, part),
            "full_corr_dist_sq": correlation_score(X)}
    diag_path = Path(output).with_suffix(".diagnostics.json")
    write_json(diag_path, diag)
    for d in diag["environments"]:
        click.echo(f"env {d['env']}: size {d['size']}, d2(R,I) = {d['corr_dist_sq']:.4f}")


@cli.command()
@csv_options
@click.option("--partition", "partition_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--learner", type=click.Choice(["erm", "irmv1", "vrex"]), default="irmv1")
@click.option("--model", "kind", type=click.Choice(["linear", "logistic", "mlp"]), default=None)
@click.option("--task", type=click.Choice(["regression", "classification"]), default=None)
@click.option("--beta", type=float, default=1e4, show_default=True)
@click.option("--iters", type=int, default=None, help="Training iterations (20000 with --full-scale, else 2000).")
@click.option("--warmup", type=int, default=100, show_default=True)
@click.option("--full-scale", is_flag=True)
@click.option("--validation", type=click.Path(exists=True, dir_okay=False), help="CSV for early stopping.")
@click.option("--output", required=True, type=click.Path(file_okay=False))
@click.pass_context
def train(ctx, input_path, schema_path, target, env_column, standardize, partition_path, learner, kind,
          task, beta, iters, warmup, full_scale, validation, output):
    """Train a model on CSV rows grouped by a partition file."""
    seed = _seed(ctx)
    schema = _schema(schema_path, target, env_column, standardize)
    ds = load_dataset(input_path, schema)
    X = ds.X
    part = Partition.load(partition_path)
    try:
        part.validate(X.shape[0])
    except PartitionError as exc:
        raise UsageFailure(f"partition does not match {input_path}: {exc}") from None
    if schema.standardize:
        mu, sd = X.mean(axis=0), X.std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - mu) / sd
    binary = bool(np.all(np.isin(ds.y, (0, 1))))
    task = task or ("classification" if binary else "regression")
    kind = kind or ("logistic" if task == "classification" else "linear")
    if learner == "irmv1" and part.k < 2:
        click.echo("warning: single-environment partition; the IRMv1 penalty only sees one "
                   "environment", err=True)
    n_iter = iters or (20000 if full_scale else 2000)
    cfg = TrainConfig(beta=0.0 if learner == "erm" else beta, n_iter=n_iter, warmup=warmup, seed=seed)
    val = None
    if validation:
        vds = load_dataset(validation, schema)
        Xv = (vds.X - mu) / sd if schema.standardize else vds.X
        val = (Xv, vds.y)
    fitter = FITTERS["irm" if learner == "irmv1" else learner]
    model = fitter(part.split(X, ds.y), kind, cfg, task, val)

    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")

    def err(Xa, ya):
        f = predict(model, Xa)
        if task == "classification":
            return float(np.mean((f > 0).astype(int) != ya))
        return float(np.mean((f - ya) ** 2))

    metrics = {"learner": learner, "kind": kind, "task": task, "seed": seed,
               "train_error": err(X, ds.y),
               "env_train_error": [err(X[i], ds.y[i]) for i in part.groups()]}
    if val is not None:
        metrics["validation_error"] = err(*val)
    write_json(out / "metrics.json", metrics)
    click.echo(json.dumps({k: v for k, v in metrics.items() if "error" in k}))


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--output", type=click.Path(file_okay=False), help="Overrides the config output path.")
@click.option("--full-scale", is_flag=True, help="Full trial and test-environment counts.")
@click.pass_context
def suite(ctx, config, output, full_scale):
    """Run an experiment suite described by a YAML config."""
    cfg = SuiteConfig.load(config)
    if output:
        cfg.output = output
    if ctx.obj.get("seed") is not None:
        cfg.seed = ctx.obj["seed"]
    if full_scale and not cfg.full_scale:
        cfg = SuiteConfig.from_dict({**cfg.__dict__, "full_scale": True})
    reports = run_suite(cfg)
    click.echo(summary_table(reports))


@cli.command()
@click.argument("kind", type=click.Choice(["toy", "irm-example", "sem", "years", "biased"]))
@click.option("--n", type=int, default=1000, show_default=True, help="Rows (per environment where applicable).")
@click.option("--d", type=int, default=2, show_default=True)
@click.option("--envs", type=int, default=2, show_default=True)
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def generate(ctx, kind, n, d, envs, output):
    """Write a synthetic dataset as CSV."""
    seed = _seed(ctx)
    env = None
    if kind == "toy":
        X, y = gen_toy_2d(n, seed)
    elif kind == "irm-example":
        data = gen_irm_example(IrmExampleConfig(d=d, sigmas=(0.1, 1.5, 2.0)[:envs], n_per_env=n, seed=seed))
        X = np.vstack([e[0] for e in data.envs])
        y = np.concatenate([e[1] for e in data.envs])
        env = np.repeat(np.arange(len(data.envs)), n)
    elif kind == "sem":
        sem = gen_sem(SemConfig(E=envs, n_per_env=n, seed=seed))
        X = np.vstack([e[0] for e in sem.train_envs])
        y = (np.concatenate([e[1] for e in sem.train_envs]) > 0).astype(int)
        env = np.repeat(np.arange(envs), n)
    elif kind == "years":
        X, y, env = gen_pseudo_years(n, max(envs, 5), seed)
        y = y.astype(int)
    else:
        X, y = gen_biased_tabular(n, seed=seed)
        y = y.astype(int)
    write_csv(output, X, y, env=env)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="envsplit", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (ConfigError, SchemaError, PartitionError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except DivergenceError as exc:
        click.echo(f"error: training diverged: {exc}", err=True)
        return 2
    except Exception as exc:  # noqa: BLE001
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
