import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from picar.exceptions import SelectionFailedError
from picar.glm import (alpha_to_theta, cumlogit_fit, cumlogit_grad, cumlogit_loglik,
                       cumlogit_predict_probs, default_grid, irls_fit, select_rank,
                       theta_to_alpha)
from picar.randfield import ordinal_probs


def test_intercept_logit_log3():
    z = np.array([1, 1, 1, 0] * 50, dtype=float)
    fit = irls_fit("logit", np.ones((200, 1)), z)
    assert fit.converged
    assert fit.coef[0] == pytest.approx(np.log(3), abs=1e-8)


def test_intercept_poisson_log_mean():
    z = np.array([0, 1, 2, 5, 3, 1], dtype=float)
    fit = irls_fit("log", np.ones((6, 1)), z)
    assert fit.coef[0] == pytest.approx(np.log(z.mean()), abs=1e-8)
    assert fit.grad_norm <= 1e-6


def test_logit_consistency():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(5000), rng.standard_normal((5000, 2))])
    b = np.array([-0.5, 1.0, 0.7])
    z = rng.binomial(1, 1 / (1 + np.exp(-X @ b))).astype(float)
    fit = irls_fit("logit", X, z)
    se = np.sqrt(np.diag(fit.cov))
    assert np.all(np.abs(fit.coef - b) < 3 * se)
    assert np.all(np.linalg.eigvalsh(fit.cov) >= 0)


def test_deviance_non_increasing():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((300, 4))
    z = rng.poisson(np.exp(X @ [0.3, -0.2, 0.5, 0.1])).astype(float)
    fit = irls_fit("log", X, z)
    assert np.all(np.diff(fit.deviance_path) <= 1e-9)


def test_separation_flags_non_convergence():
    x = np.linspace(-1, 1, 40)
    z = (x > 0).astype(float)
    fit = irls_fit("logit", np.column_stack([np.ones(40), x]), z)
    assert not fit.converged


def test_ridge_fallback():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(100)
    X = np.column_stack([x, x, np.ones(100)])
    z = rng.binomial(1, 0.5, 100).astype(float)
    fit = irls_fit("logit", X, z)
    assert fit.ridge
    assert np.isfinite(fit.coef).all()


def test_unknown_family():
    with pytest.raises(ValueError):
        irls_fit("probit", np.ones((3, 1)), np.ones(3))


def _ordinal_data(n=800, seed=0, theta=(0.0, 1.0, 2.0)):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    P = ordinal_probs(X @ [1.0, -0.5], theta)
    z = 1 + (rng.uniform(size=n)[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1)
    return X, z


def test_cumlogit_two_categories_is_logit():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((400, 2))
    y = rng.binomial(1, 1 / (1 + np.exp(-X @ [0.8, -0.4])))
    a = cumlogit_fit(X, y + 1, 2)
    b = irls_fit("logit", X, y.astype(float))
    np.testing.assert_allclose(a.beta, b.coef, atol=1e-6)


def test_cumlogit_optimum_and_recovery():
    X, z = _ordinal_data(3000)
    fit = cumlogit_fit(X, z, 4)
    assert fit.converged and fit.grad_norm <= 1e-6
    np.testing.assert_allclose(fit.theta, [0, 1, 2], atol=0.2)
    np.testing.assert_allclose(fit.beta, [1.0, -0.5], atol=0.15)


def test_cumlogit_gradient_finite_differences():
    X, z = _ordinal_data(200, seed=4)
    rng = np.random.default_rng(5)
    h = 1e-5
    for _ in range(10):
        a, b = rng.normal(0, 0.5, 2), rng.normal(0, 1, 2)
        g = cumlogit_grad(a, b, X, z, 4)
        par = np.concatenate([a, b])
        fd = np.empty(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            up, dn = par + e, par - e
            fd[i] = (cumlogit_loglik(up[:2], up[2:], X, z, 4)
                     - cumlogit_loglik(dn[:2], dn[2:], X, z, 4)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)


def test_cumlogit_missing_category():
    X, z = _ordinal_data(100)
    z = np.where(z == 3, 2, z)
    with pytest.raises(ValueError, match=r"\[3\]"):
        cumlogit_fit(X, z, 4)


def test_cumlogit_monotone_cumulative():
    X, z = _ordinal_data(500, seed=7)
    fit = cumlogit_fit(X, z, 4)
    cum = np.cumsum(cumlogit_predict_probs(fit, X), axis=1)
    assert np.all(np.diff(cum, axis=1) >= 0)


def test_alpha_theta_transform():
    np.testing.assert_allclose(alpha_to_theta([0.0, 0.0]), [0, 1, 2])
    np.testing.assert_allclose(theta_to_alpha([0, 1, 2]), [0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_theta_monotone_property(alpha):
    th = alpha_to_theta(alpha)
    assert th[0] == 0 and np.all(np.diff(th) > 0)


def test_default_grid():
    g = default_grid(200)
    assert g[:3] == [2, 3, 4] and 50 in g and 51 not in g and g[-1] == 200
    assert default_grid(62)[-1] == 62
    assert default_grid(10, full=True) == list(range(2, 11))


def _rank_problem(seed=0, n=400, P=30):
    rng = np.random.default_rng(seed)
    AM = rng.standard_normal((n + 100, P))
    X = rng.standard_normal((n + 100, 2))
    eta = X @ [1, 1] + AM[:, :5] @ rng.normal(0, 0.7, 5)
    z = rng.binomial(1, 1 / (1 + np.exp(-eta))).astype(float)
    return X[:n], z[:n], AM[:n], X[n:], z[n:], AM[n:]


def test_select_rank_argmin():
    sel = select_rank(*_rank_problem(), family="binary", grid=range(2, 31))
    best = np.min(sel.cvmspe)
    assert sel.cvmspe[sel.grid.index(sel.chosen)] == best
    assert all(best <= s for s in sel.cvmspe)
    assert sel.fit.coef.size == 2 + sel.chosen


def test_select_rank_parallel_identical():
    a = select_rank(*_rank_problem(1), family="binary", grid=range(2, 12))
    b = select_rank(*_rank_problem(1), family="binary", grid=range(2, 12), n_jobs=2)
    np.testing.assert_array_equal(a.cvmspe, b.cvmspe)


def test_select_rank_tie_lowest():
    X, z, AM, Xc, zc, AMc = _rank_problem(2)
    AM[:, 3:] = 0.0
    AMc[:, 3:] = 0.0
    sel = select_rank(X, z, AM, Xc, zc, AMc, family="binary", grid=[3, 4, 5])
    assert sel.chosen == 3


def test_select_rank_grid_bounds():
    with pytest.raises(ValueError):
        select_rank(*_rank_problem(), grid=[1, 2])
    with pytest.raises(ValueError):
        select_rank(*_rank_problem(), grid=[2, 99])


def test_select_rank_all_fail():
    x = np.linspace(-1, 1, 60)
    X = x[:, None]
    z = (x > 0).astype(float)
    AM = np.column_stack([x, x ** 3, np.sin(x)])
    with pytest.raises(SelectionFailedError):
        select_rank(X, z, AM, X, z, AM, family="binary", grid=[2, 3])
