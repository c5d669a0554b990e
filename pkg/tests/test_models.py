import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from envsplit.models import (DivergenceError, ModelParams, TrainConfig, classify, fit_erm, fit_irmv1,
                             fit_vrex, forward, init_params, irmv1_penalty, mlp_hidden_size,
                             objective_and_grad, predict)
from envsplit.numerics import central_diff, max_relative_error


def logistic_mle(X, y, iters=100):
    """Unpenalised logistic regression by Newton's method."""
    A = np.column_stack([X, np.ones(len(y))])
    beta = np.zeros(A.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-A @ beta))
        g = A.T @ (p - y)
        H = (A * (p * (1 - p))[:, None]).T @ A
        step = np.linalg.solve(H, g)
        beta -= step
        if np.max(np.abs(step)) < 1e-14:
            break
    return A @ beta


def spurious_envs(seed, n=500):
    rng = np.random.default_rng(seed)
    out = []
    for a in (1.5, -0.5):
        xc = rng.normal(size=n)
        y = xc + 0.5 * rng.normal(size=n)
        xs = a * y + 0.5 * rng.normal(size=n)
        out.append((np.column_stack([xc, xs]), y))
    return out


# -- penalty --------------------------------------------------------------------------------

def test_penalty_hand_example():
    assert irmv1_penalty([1.0, 2.0], [0.0, 0.0], "mse") == pytest.approx(25.0)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_penalty_zero_output(seed):
    y = np.random.default_rng(seed).normal(size=7)
    assert irmv1_penalty(np.zeros(7), y, "mse") == 0.0


def test_penalty_bce_closed_form():
    f = np.array([0.5, -1.0, 2.0])
    y = np.array([1.0, 0.0, 0.0])
    s = 1 / (1 + np.exp(-f))
    assert irmv1_penalty(f, y, "bce") == pytest.approx(np.mean(f * (s - y)) ** 2, rel=1e-12)


def test_penalty_errors():
    with pytest.raises(ValueError):
        irmv1_penalty([], [], "mse")
    with pytest.raises(ValueError):
        irmv1_penalty([1.0, 2.0], [1.0], "mse")


@pytest.mark.parametrize("seed", range(20))
def test_penalty_vanishes_at_ols(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(100, 4))
    y = X @ rng.normal(size=4) + rng.normal(size=100) + 0.7
    A = np.column_stack([X, np.ones(100)])
    f = A @ np.linalg.lstsq(A, y, rcond=None)[0]
    assert irmv1_penalty(f, y, "mse") <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_penalty_vanishes_at_logistic_mle(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(200, 3))
    y = (rng.random(200) < 1 / (1 + np.exp(-X @ rng.normal(size=3)))).astype(float)
    assert irmv1_penalty(logistic_mle(X, y), y, "bce") <= 1e-10


# -- gradients ------------------------------------------------------------------------------

def _flat_check(params, envs, loss_kind, method, beta, masks):
    _, grads = objective_and_grad(params, envs, loss_kind, method, beta, 1e-3, masks)
    worst = 0.0
    for name in params:
        def f(v, name=name):
            trial = dict(params)
            trial[name] = v.reshape(params[name].shape)
            return objective_and_grad(trial, envs, loss_kind, method, beta, 1e-3, masks)[0]
        numeric = central_diff(f, params[name].ravel(), h=1e-5)
        worst = max(worst, max_relative_error(grads[name].ravel(), numeric))
    return worst


@pytest.mark.parametrize("seed", range(50))
def test_mlp_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 6))
    params = init_params("mlp", p, rng)
    for k in params:
        params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
    envs = [(rng.normal(size=(15, p)), rng.normal(size=15)) for _ in range(2)]
    h = mlp_hidden_size(p)
    masks = tuple((rng.random((30, h)) < 0.5) / 0.5 for _ in range(2))
    assert _flat_check(params, envs, "mse", "irm", 1.0, masks) < 1e-4


@pytest.mark.parametrize("method", ["erm", "irm", "vrex"])
@pytest.mark.parametrize("loss_kind", ["mse", "bce"])
def test_linear_objective_gradients(method, loss_kind):
    rng = np.random.default_rng(1)
    params = {"coef": rng.normal(size=3), "intercept": np.asarray(0.3)}
    envs = []
    for _ in range(3):
        X = rng.normal(size=(20, 3))
        y = (rng.random(20) < 0.5).astype(float) if loss_kind == "bce" else rng.normal(size=20)
        envs.append((X, y))
    assert _flat_check(params, envs, loss_kind, method, 5.0, None) < 1e-6


def test_hidden_size_rule():
    assert [mlp_hidden_size(p) for p in (1, 2, 3, 5, 8)] == [4, 8, 8, 16, 32]


def test_mlp_forward_by_hand():
    params = {
        "W1": np.array([[0.5, -0.25]]), "b1": np.array([0.1, 0.0]),
        "W2": np.array([[1.0, 0.0], [0.5, 2.0]]), "b2": np.array([0.0, -0.1]),
        "W3": np.array([[0.3], [-0.7]]), "b3": np.array([0.05]),
    }
    x = 0.8
    h1 = np.tanh([0.5 * x + 0.1, -0.25 * x])
    h2 = np.tanh([h1[0] * 1.0 + h1[1] * 0.5, h1[1] * 2.0 - 0.1])
    expected = 0.3 * h2[0] - 0.7 * h2[1] + 0.05
    out, _ = forward(params, np.array([[x]]))
    assert abs(out[0] - expected) < 1e-12


# -- training -------------------------------------------------------------------------------

def test_closed_form_recovers_noiseless_coefficients():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 4))
    beta = np.array([1.0, -2.0, 0.5, 3.0])
    y = X @ beta + 1.5
    model = fit_erm([(X, y)], "linear", TrainConfig(closed_form=True, l2=0.0))
    np.testing.assert_allclose(model.coef, beta, atol=1e-8)
    np.testing.assert_allclose(predict(model, X), y, atol=1e-6)


def test_closed_form_singular_falls_back():
    X = np.column_stack([np.arange(10.0), np.arange(10.0)])
    y = np.arange(10.0)
    model = fit_erm([(X, y)], "linear", TrainConfig(closed_form=True, l2=0.0, n_iter=50))
    assert model.telemetry["method"] == "erm"
    assert "closed_form" not in model.telemetry


def test_uncorrelated_features_give_univariate_coefficients():
    rng = np.random.default_rng(3)
    # QR against a constant column: centred, mutually orthogonal features
    Z = 5 * np.linalg.qr(np.column_stack([np.ones(40), rng.normal(size=(40, 3))]))[0][:, 1:]
    y = Z @ [2.0, -1.0, 0.5] + rng.normal(size=40)
    model = fit_erm([(Z, y)], "linear", TrainConfig(closed_form=True, l2=0.0))
    for i in range(3):
        zc, yc = Z[:, i] - Z[:, i].mean(), y - y.mean()
        assert model.coef[i] == pytest.approx(zc @ yc / (zc @ zc), abs=1e-8)


def test_logistic_separable_zero_training_error():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    X = X + 0.3 * np.sign(X[:, :1] + X[:, 1:])
    model = fit_erm([(X, y)], "logistic", TrainConfig(n_iter=3000, lr=0.05))
    assert np.mean(classify(model, X) != y) == 0.0


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_irm_with_zero_beta_is_erm(kind):
    envs = spurious_envs(0, n=80)
    cfg = TrainConfig(beta=0.0, n_iter=200, seed=3)
    a, b = fit_erm(envs, kind, cfg), fit_irmv1(envs, kind, cfg)
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], atol=1e-10, rtol=0)


def test_vrex_zero_beta_and_identical_envs_match_erm():
    X, y = spurious_envs(1, n=80)[0]
    cfg = TrainConfig(beta=50.0, n_iter=200, warmup=0, seed=2)
    same = [(X, y), (X.copy(), y.copy())]
    np.testing.assert_array_equal(fit_vrex(same, "linear", cfg).coef, fit_erm(same, "linear", cfg).coef)
    envs = spurious_envs(1, n=80)
    cfg0 = TrainConfig(beta=0.0, n_iter=200, seed=2)
    np.testing.assert_array_equal(fit_vrex(envs, "mlp", cfg0).params["W1"],
                                  fit_erm(envs, "mlp", cfg0).params["W1"])


def test_vrex_shrinks_spurious_coefficient():
    wins = 0
    for seed in range(10):
        envs = spurious_envs(seed)
        cfg = TrainConfig(beta=10.0, n_iter=3000, lr=0.01, seed=seed)
        wins += abs(fit_vrex(envs, "linear", cfg).coef[1]) < abs(fit_erm(envs, "linear", cfg).coef[1])
    assert wins >= 8


def test_training_deterministic():
    envs = spurious_envs(2, n=60)
    cfg = TrainConfig(beta=1.0, n_iter=150, warmup=20, seed=5)
    a, b = fit_irmv1(envs, "mlp", cfg), fit_irmv1(envs, "mlp", cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_divergence_reports_iteration():
    envs = spurious_envs(0, n=50)
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore"):
        fit_erm(envs, "linear", TrainConfig(lr=1e300, n_iter=50))
    assert info.value.iteration >= 0


def test_validation_keeps_earliest_best():
    envs = spurious_envs(0, n=60)
    val = spurious_envs(9, n=60)[0]
    model = fit_erm(envs, "linear", TrainConfig(n_iter=500, checkpoint_every=100), val_data=val)
    assert model.telemetry["best_iteration"] in (100, 200, 300, 400, 500)
    assert model.telemetry["best_val_error"] == pytest.approx(
        float(np.mean((predict(model, val[0]) - val[1]) ** 2)))


def test_model_json_round_trip(tmp_path):
    envs = spurious_envs(0, n=40)
    model = fit_irmv1(envs, "mlp", TrainConfig(beta=1.0, n_iter=30, warmup=10))
    model.save(tmp_path / "m.json")
    back = ModelParams.load(tmp_path / "m.json")
    assert (back.kind, back.task, back.hidden_size) == ("mlp", "regression", model.hidden_size)
    np.testing.assert_array_equal(predict(back, envs[0][0]), predict(model, envs[0][0]))


def test_predict_zero_model_and_shape_check():
    model = ModelParams("linear", "regression", init_params("linear", 3, None))
    np.testing.assert_array_equal(predict(model, np.ones((4, 3))), np.zeros(4))
    with pytest.raises(ValueError):
        predict(model, np.ones((4, 2)))


@pytest.mark.parametrize("envs, kind", [
    ([], "linear"),
    ([(np.ones((3, 2)), np.ones(3)), (np.ones((3, 3)), np.ones(3))], "linear"),
    ([(np.ones((3, 2)), np.array([0.0, 1.0, 2.0]))], "logistic"),
])
def test_training_input_errors(envs, kind):
    with pytest.raises(ValueError):
        fit_erm(envs, kind, TrainConfig(n_iter=5))


@pytest.mark.parametrize("kwargs", [{"beta": -1}, {"n_iter": 0}, {"dropout_p": 1.0}])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)
