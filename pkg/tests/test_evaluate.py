import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from picar.basis import identity_kernel
from picar.evaluate import (coverage_from_intervals, coverage_study, cvmspe, misclassification,
                            mpr, parameter_summary, predict, score)
from picar.mcmc import ChainConfig, ModelSpec, run_chain


def test_single_draw_is_deterministic_transform():
    rng = np.random.default_rng(0)
    X, AM = rng.standard_normal((20, 2)), rng.standard_normal((20, 3))
    draws = {"beta": np.array([[0.4, -0.2]]), "delta": np.array([[0.1, 0.2, -0.3]])}
    eta = X @ draws["beta"][0] + AM @ draws["delta"][0]
    s = predict(draws, "binary", AM, X)
    np.testing.assert_allclose(s.mean, 1 / (1 + np.exp(-eta)))
    np.testing.assert_allclose(s.sd, 0.0, atol=1e-12)
    np.testing.assert_allclose(predict(draws, "count", AM, X).z_hat, np.exp(eta))
    draws["delta_b"] = np.array([[0.5, 0.0, 0.1]])
    eta_svc = eta + X[:, 0] * (AM @ draws["delta_b"][0])
    np.testing.assert_allclose(predict(draws, "svc", AM, X).mean, np.exp(eta_svc))


def test_null_draws_give_half():
    draws = {"beta": np.zeros((5, 2)), "delta": np.zeros((5, 4))}
    s = predict(draws, "binary", np.ones((7, 4)), np.ones((7, 2)))
    np.testing.assert_allclose(s.mean, 0.5)


def test_ordinal_modal_category():
    rng = np.random.default_rng(1)
    X, AM = rng.standard_normal((30, 2)), rng.standard_normal((30, 2))
    draws = {"beta": rng.normal(1, 0.1, (40, 2)), "delta": rng.normal(0, 0.1, (40, 2)),
             "alpha": rng.normal(0, 0.1, (40, 2))}
    s = predict(draws, "ordinal", AM, X, J=4)
    assert s.category_probs.shape == (30, 4)
    np.testing.assert_allclose(s.category_probs.sum(axis=1), 1.0)
    assert set(np.unique(s.z_hat)) <= {1, 2, 3, 4}
    cats = []
    for b, d, a in zip(draws["beta"], draws["delta"], draws["alpha"]):
        th = np.concatenate([[-np.inf, 0], np.cumsum(np.exp(a)), [np.inf]])
        eta = X @ b + AM @ d
        P = np.diff(1 / (1 + np.exp(-(th[None] - eta[:, None]))), axis=1)
        cats.append(1 + P.argmax(axis=1))
    cats = np.array(cats)
    modal = np.array([np.bincount(cats[:, i], minlength=5)[1:].argmax() + 1 for i in range(30)])
    np.testing.assert_array_equal(s.z_hat, modal)


def test_prediction_matches_csv_reread(tmp_path):
    rng = np.random.default_rng(2)
    X, AM = rng.standard_normal((60, 2)), rng.standard_normal((60, 4))
    z = rng.binomial(1, 0.5, 60).astype(float)
    spec = ModelSpec("binary", X, AM, identity_kernel(4))
    ch = run_chain(spec, z, ChainConfig(300, 100, 2, seed=3))
    ch.to_csv(tmp_path)
    Xc, AMc = rng.standard_normal((10, 2)), rng.standard_normal((10, 4))

    def read(name):
        with open(tmp_path / f"chain_{name}.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        return [[float(v) for v in r[1:]] for r in rows]

    betas, deltas = read("beta"), read("delta")
    ref = []
    for i in range(10):
        ps = []
        for b, d in zip(betas, deltas):
            eta = sum(bj * x for bj, x in zip(b, Xc[i])) + sum(dj * a for dj, a in zip(d, AMc[i]))
            ps.append(1 / (1 + np.exp(-eta)))
        ref.append(sum(ps) / len(ps))
    s = predict(ch, "binary", AMc, Xc)
    np.testing.assert_allclose(s.mean, ref, rtol=1e-12)
    s2 = predict(ch, "binary", AMc, Xc)
    np.testing.assert_array_equal(s.mean, s2.mean)


def test_dimension_mismatch():
    draws = {"beta": np.zeros((2, 2)), "delta": np.zeros((2, 3))}
    with pytest.raises(ValueError):
        predict(draws, "binary", np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        predict(draws, "binary", np.zeros((4, 3)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        predict({"beta": np.zeros((2, 2))}, "binary", np.zeros((4, 3)), np.zeros((4, 2)))


def test_metric_basics():
    assert cvmspe([1, 2, 3], [1, 2, 3]) == 0
    assert mpr([1, 2, 3], [1, 2, 3]) == 0
    assert cvmspe([0, 1], [0.5, 0.5]) == 0.25
    with pytest.raises(ValueError):
        cvmspe([], [])
    with pytest.raises(ValueError):
        mpr([1, 2], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(0, 1000))
def test_metric_properties(probs, seed):
    z = np.random.default_rng(seed).binomial(1, 0.5, len(probs)).astype(float)
    p = np.asarray(probs)
    assert cvmspe(z, p) >= 0
    assert 0 <= mpr(z, (p >= 0.5).astype(float)) <= 1
    assert misclassification(z, p) == mpr(z, (p >= 0.5).astype(float))


def test_score_dispatch():
    draws = {"beta": np.zeros((3, 1)), "delta": np.zeros((3, 1)), "alpha": np.zeros((3, 1))}
    s = predict(draws, "ordinal", np.zeros((4, 1)), np.zeros((4, 1)))
    assert score("ordinal", [1, 1, 2, 2], s) == mpr([1, 1, 2, 2], s.z_hat)


def test_parameter_summary_names():
    d = {"beta": np.random.default_rng(0).normal(size=(100, 2)), "alpha": np.zeros((100, 2)),
         "tau": np.ones((100, 1))}
    out, flags = parameter_summary(d)
    assert set(out) == {"beta_1", "beta_2", "alpha_2", "alpha_3", "tau_1"}
    lo, hi = out["beta_1"][1:]
    assert lo <= out["beta_1"][0] <= hi and not flags


def _oracle_runner(cfg, rep):
    return {"icar": {"beta_1": (1.0, 0.0, 2.0), "beta_2": (1.0, 0.0, 2.0)}}


def test_coverage_oracle_intervals():
    tab = coverage_study({"family": "binary", "beta": [1, 1]}, 10, runner=_oracle_runner)
    assert tab.coverage["icar"] == {"beta_1": 1.0, "beta_2": 1.0}
    assert tab.n_ok["icar"] == 10


def test_coverage_single_replicate():
    def runner(cfg, rep):
        return {"ind": {"beta_1": (0.5, 0.2, 0.9), "beta_2": (1.0, 0.5, 1.5)}}
    tab = coverage_study({"family": "binary", "beta": [1, 1]}, 1, runner=runner, min_replicates=1)
    assert tab.coverage["ind"]["beta_1"] in (0.0, 1.0)
    assert tab.coverage["ind"] == {"beta_1": 0.0, "beta_2": 1.0}


def test_coverage_failures_recorded():
    def runner(cfg, rep):
        if rep == 3:
            raise RuntimeError("boom")
        return _oracle_runner(cfg, rep)
    with pytest.warns(RuntimeWarning):
        tab = coverage_study({"family": "binary", "beta": [1, 1]}, 10, runner=runner)
    assert tab.failures == [(3, "RuntimeError: boom")]
    assert tab.n_ok["icar"] == 9


def test_coverage_minimum():
    with pytest.raises(ValueError):
        coverage_study({"family": "binary"}, 5, runner=_oracle_runner)
    assert coverage_from_intervals([(0, 1), (2, 3)], 0.5) == 0.5


def test_parameter_summary_intercept_first():
    d = {"beta": np.column_stack([np.full(50, 1.0), np.full(50, 2.0), np.full(50, -3.0)])}
    out, _ = parameter_summary(d, beta_names=["beta_1", "beta_2", "beta_0"])
    assert list(out) == ["beta_0", "beta_1", "beta_2"]
    assert out["beta_0"][0] == -3.0 and out["beta_2"][0] == 2.0
    with pytest.raises(ValueError):
        parameter_summary(d, beta_names=["beta_1"])
