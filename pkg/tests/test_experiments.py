import numpy as np
import pytest

from envsplit.datagen import IrmExampleConfig, gen_irm_example, gen_pseudo_years
from envsplit.experiments import (METHODS, ConfigError, SuiteConfig, enumerate_tasks, run_csv_tasks,
                                  run_suite, sub_seed)
from envsplit.io import Dataset, write_csv
from envsplit.models import fit_erm
from envsplit.evaluate import coef_mse

FAST = {"train": {"n_iter": 150, "warmup": 50}, "decorr": {"T": 100}, "eiil": {"steps": 100}}


def fast_cfg(**kw):
    return SuiteConfig(**{**FAST, **kw})


def per_trial(reports):
    return {(tuple(r.cell.items()), r.method): r.per_trial for r in reports}


# -- task enumeration -----------------------------------------------------------------------

@pytest.mark.parametrize("task_set", ["three_train", "one_train"])
def test_twenty_tasks_for_five_envs(task_set):
    tasks = enumerate_tasks(5, task_set)
    assert len(tasks) == 20
    assert len(set(tasks)) == 20
    for t in tasks:
        assert sorted(t.train + t.val + t.test) == list(range(5))
        assert len(t.val) == 1
    assert tasks == enumerate_tasks(5, task_set)


def test_unknown_task_set():
    with pytest.raises(ConfigError):
        enumerate_tasks(5, "four_train")


# -- configuration --------------------------------------------------------------------------

@pytest.mark.parametrize("kw, match", [
    ({"suite": "nope"}, "unknown suite"),
    ({"suite": "irm_example", "methods": ["erm", "magic"]}, "valid methods"),
    ({"suite": "irm_example", "methods": []}, "empty"),
    ({"suite": "irm_example", "trials": 0}, "trials"),
    ({"suite": "irm_example", "train": {"momentum": 0.9}}, "train section"),
    ({"suite": "irm_example", "decorr": {"p0": 2.0}}, "p0"),
])
def test_config_errors(kw, match):
    with pytest.raises(ConfigError, match=match):
        SuiteConfig(**kw)


def test_unknown_method_lists_valid_ones():
    with pytest.raises(ConfigError) as info:
        SuiteConfig(suite="irm_example", methods=["magic"])
    assert all(m in str(info.value) for m in METHODS)


def test_yaml_errors_carry_line(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("suite: irm_example\ntrials: 2\nmethods: [erm, magic]\n")
    with pytest.raises(ConfigError, match=r"c.yaml:3"):
        SuiteConfig.load(path)
    path.write_text("suite: irm_example\ntrials: [1\n")
    with pytest.raises(ConfigError, match=r"c.yaml:\d"):
        SuiteConfig.load(path)
    path.write_text("suite: irm_example\ndecorr:\n  p0: 2.0\n")
    with pytest.raises(ConfigError, match=r"c.yaml:2: decorr section"):
        SuiteConfig.load(path)
    path.write_text("suite: irm_example\nbogus: 1\n")
    with pytest.raises(ConfigError, match=r"c.yaml:2: .*bogus"):
        SuiteConfig.load(path)


def test_defaults_and_full_scale():
    cfg = SuiteConfig(suite="risks_of_irm")
    assert cfg.trials == 5 and cfg.test_envs == 500
    assert cfg.env_counts == [2, 3, 4, 5, 6, 7, 8]
    assert cfg.train_config(0).beta == 1e4
    big = SuiteConfig(suite="risks_of_irm", full_scale=True)
    assert big.trials == 10 and big.test_envs == 5000
    assert SuiteConfig(suite="irm_example").train_config(0).beta == 10.0


def test_echo_is_fully_resolved():
    echo = SuiteConfig(suite="irm_example").echo()
    assert echo["train"]["lr"] == 1e-3
    assert echo["decorr"]["p0"] == 0.1
    assert echo["eiil"]["steps"] == 10000


def test_sub_seed():
    assert sub_seed(0, "a", 1) == sub_seed(0, "a", 1)
    assert len({sub_seed(0, "a", 1), sub_seed(0, "a", 2), sub_seed(1, "a", 1), sub_seed(0, "b", 1)}) == 4


# -- suites ---------------------------------------------------------------------------------

def test_irm_example_reproducible_and_method_isolated():
    base = dict(suite="irm_example", trials=2, dims=[2], env_counts=[2])
    a = run_suite(fast_cfg(methods=["erm", "decorr+irm", "random+irm"], **base))
    b = run_suite(fast_cfg(methods=["erm", "decorr+irm", "random+irm"], **base))
    c = run_suite(fast_cfg(methods=["random+irm"], **base))
    assert per_trial(a) == per_trial(b)
    key = ((("n_envs", 2), ("d", 2)), "random+irm")
    assert per_trial(a)[key] == per_trial(c)[key]


def test_parallel_matches_serial():
    base = dict(suite="irm_example", trials=2, dims=[2], env_counts=[2], methods=["erm", "random+irm"])
    assert per_trial(run_suite(fast_cfg(**base))) == per_trial(run_suite(fast_cfg(n_jobs=2, **base)))


def test_erm_matches_models_path():
    cfg = fast_cfg(suite="irm_example", trials=1, dims=[2], env_counts=[2], methods=["erm"])
    (rep,) = run_suite(cfg)
    data = gen_irm_example(IrmExampleConfig(d=2, sigmas=(0.1, 1.5), seed=sub_seed(0, "irm_example", 2, 2, 0, "data")))
    X = np.vstack([e[0] for e in data.envs])
    y = np.concatenate([e[1] for e in data.envs])
    model = fit_erm([(X, y)], "linear", cfg.train_config(sub_seed(0, "irm_example", 2, 2, 0, "train")))
    assert rep.per_trial["coef_mse"] == [coef_mse(model.coef, data.beta_star)]


def test_risks_smoke_one_row_per_method(tmp_path):
    methods = ["erm", "random+irm", "decorr+irm", "irm_oracle"]
    cfg = fast_cfg(suite="risks_of_irm", trials=1, env_counts=[2], test_envs=5, methods=methods,
                   output=str(tmp_path))
    reports = run_suite(cfg)
    assert sorted(r.method for r in reports) == sorted(methods)
    for r in reports:
        wc, mean = r.mean("worst_case_error"), r.mean("mean_error")
        assert 0 <= mean <= wc <= 1
    assert (tmp_path / "risks_of_irm.json").exists() and (tmp_path / "risks_of_irm.csv").exists()


def test_toy_dump_writes_scatter(tmp_path):
    cfg = fast_cfg(suite="toy_dump", trials=1, output=str(tmp_path), data={"n": 200})
    reports = run_suite(cfg)
    assert {r.method for r in reports} == {"random+irm", "eiil", "kmeans+irm", "decorr+irm"}
    lines = (tmp_path / "toy_decorr.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,env_id" and len(lines) == 201
    assert {line.rsplit(",", 1)[1] for line in lines[1:]} == {"0", "1"}


@pytest.fixture(scope="module")
def years_dataset():
    X, y, env = gen_pseudo_years(80, 5, seed=0)
    return Dataset(X, y, [f"x{i}" for i in range(5)], env, list(range(5)))


def test_csv_tasks_three_train(years_dataset):
    cfg = fast_cfg(suite="csv_tasks", trials=1, methods=["erm", "irm_oracle", "decorr+irm"],
                   data={"task_set": "three_train", "model": "logistic"})
    reports = run_csv_tasks(cfg, years_dataset)
    assert {r.method for r in reports} == {"erm", "irm_oracle", "decorr+irm"}
    for r in reports:
        assert r.cell == {"task_set": "three_train", "n_tasks": 20}
        avg, worst = r.mean("avg_error"), r.mean("worst_error")
        assert 0 <= avg <= worst <= 1


def test_csv_tasks_one_train_skips_multi_env_learners(years_dataset):
    cfg = fast_cfg(suite="csv_tasks", trials=1, methods=["erm", "vrex"],
                   data={"task_set": "one_train", "model": "logistic"})
    reports = run_csv_tasks(cfg, years_dataset)
    assert [r.method for r in reports] == ["erm"]


def test_csv_tasks_from_file_and_errors(tmp_path, years_dataset):
    path = tmp_path / "years.csv"
    write_csv(path, years_dataset.X, years_dataset.y.astype(int), env=years_dataset.env)
    data = {"path": str(path), "target": "y", "env_column": "env", "model": "logistic"}
    reports = run_suite(fast_cfg(suite="csv_tasks", trials=1, methods=["erm"], data=data))
    assert reports[0].cell["n_tasks"] == 20

    with pytest.raises(ConfigError, match="env_column"):
        run_suite(fast_cfg(suite="csv_tasks", methods=["erm"], data={**data, "env_column": None}))
    with pytest.raises(ConfigError, match="data.path"):
        run_suite(fast_cfg(suite="csv_tasks", methods=["erm"], data={}))
    ds = Dataset(years_dataset.X, years_dataset.y * 3, years_dataset.feature_names, years_dataset.env, list(range(5)))
    with pytest.raises(ConfigError, match="binary"):
        run_csv_tasks(fast_cfg(suite="csv_tasks", methods=["erm"], data={"model": "logistic"}), ds)
    with pytest.raises(ConfigError, match="bias_column"):
        run_csv_tasks(fast_cfg(suite="csv_tasks", methods=["erm"],
                               data={"model": "logistic", "task_set": "biased"}), years_dataset)
