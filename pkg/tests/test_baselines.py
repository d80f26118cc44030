import numpy as np
import pytest

from octhybrid.baselines import (
    BASE_FEATURES,
    LogisticModel,
    build_features,
    feature_names,
    fit_logistic,
    fit_variant,
)
from octhybrid.errors import ConvergenceError, InputValidationError, UndefinedStatisticError


def _logistic_data(rng, n=200, p=5):
    x = rng.normal(size=(n, p)) * rng.uniform(0.5, 3, p) + rng.normal(0, 5, p)
    z = (x - x.mean(0)) / x.std(0)
    eta = 0.3 + z @ rng.normal(0, 1, p)
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return x, y


def _gd_oracle(x, y, lam, steps=40000):
    z = (x - x.mean(0)) / x.std(0)
    x1 = np.hstack([np.ones((len(y), 1)), z])
    lip = 0.25 * np.linalg.eigvalsh(x1.T @ x1 / len(y)).max() + lam
    beta = np.zeros(x1.shape[1])
    pen = np.full(beta.size, lam)
    pen[0] = 0.0
    for _ in range(steps):
        mu = 1 / (1 + np.exp(-(x1 @ beta)))
        beta += (x1.T @ (y - mu) / len(y) - pen * beta) / lip
    return beta


def test_matches_gradient_descent_oracle():
    rng = np.random.default_rng(0)
    x, y = _logistic_data(rng)
    m = fit_logistic(x, y, lam=1e-3)
    beta = _gd_oracle(x, y, 1e-3)
    assert abs(m.intercept - beta[0]) < 1e-5
    assert np.abs(m.coef - beta[1:]).max() < 1e-5
    assert m.converged and m.iterations <= 100


def test_symmetric_data_gives_zero_intercept():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(50, 3)) + 0.3
    x = np.vstack([x0, -x0])
    y = np.r_[np.ones(50), np.zeros(50)]
    m = fit_logistic(x, y)
    assert abs(m.intercept) < 1e-10


def test_affine_rescaling_invariance():
    rng = np.random.default_rng(2)
    x, y = _logistic_data(rng, p=4)
    a = np.array([2.0, 0.01, 300.0, 1.5])
    c = np.array([-5.0, 100.0, 0.0, 7.0])
    m1 = fit_logistic(x, y)
    m2 = fit_logistic(x * a + c, y)
    assert np.allclose(m1.predict_proba(x), m2.predict_proba(x * a + c), atol=1e-10)


def _deviance(m, x, y):
    p = m.predict_proba(x)
    return -2 * np.sum(y * np.log(p) + (1 - y) * np.log1p(-p))


def test_nested_models_deviance():
    rng = np.random.default_rng(3)
    x, y = _logistic_data(rng, p=5)
    small = fit_logistic(x[:, :3], y, lam=0.0)
    big = fit_logistic(x, y, lam=0.0)
    assert _deviance(big, x, y) <= _deviance(small, x[:, :3], y) + 1e-9


def test_zero_variance_feature_named():
    rng = np.random.default_rng(4)
    x, y = _logistic_data(rng, p=3)
    x[:, 1] = 4.0
    with pytest.raises(InputValidationError, match="'vcdr'"):
        fit_logistic(x, y, names=["age", "vcdr", "gcc_inf"])


def test_single_class_and_bad_labels():
    x = np.random.default_rng(5).normal(size=(10, 2))
    with pytest.raises(UndefinedStatisticError):
        fit_logistic(x, np.ones(10))
    with pytest.raises(InputValidationError):
        fit_logistic(x, np.arange(10) % 3)


def test_convergence_failure_carries_trace():
    rng = np.random.default_rng(6)
    x, y = _logistic_data(rng)
    with pytest.raises(ConvergenceError) as info:
        fit_logistic(x, y, max_iter=1, tol=1e-30)
    assert len(info.value.trace) == 1


def test_step_halving_keeps_objective_monotone():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(60, 2))
    y = (x[:, 0] + 0.1 * rng.normal(size=60) > 0).astype(float)  # nearly separable
    m = fit_logistic(x, y, lam=1e-4, max_iter=100)
    objs = [t["objective"] for t in m.trace]
    assert all(b >= a - 1e-12 for a, b in zip(objs, objs[1:]))


def _record(rng, **kw):
    r = {n: float(rng.normal(1, 0.2)) for n in BASE_FEATURES}
    r.update(nflr_avg=float(rng.normal(-8, 1)), nflr_flv=float(-abs(rng.normal(0, 1))))
    r.update(kw)
    return r


def test_variants_and_feature_vectors():
    assert feature_names("logit-a") == BASE_FEATURES
    assert feature_names("logit-b")[-2:] == ("nflr_avg", "nflr_flv")
    rng = np.random.default_rng(8)
    rec = _record(rng)
    assert build_features(rec, "logit-b").shape == (11,)
    bad = dict(rec)
    del bad["vcdr"]
    with pytest.raises(InputValidationError, match="vcdr"):
        build_features(bad, "logit-a")


def test_fit_variant_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    recs = [_record(rng) for _ in range(60)]
    labels = np.array([int(r["rnfl_avg"] < 1.0) for r in recs])
    m = fit_variant(recs, labels, "logit-b")
    path = tmp_path / "model.json"
    m.save(path)
    again = LogisticModel.load(path)
    x = np.vstack([build_features(r, "logit-b") for r in recs])
    assert np.array_equal(m.predict_proba(x), again.predict_proba(x))
    with pytest.raises(InputValidationError):
        again.predict_proba(x[:, :9])
