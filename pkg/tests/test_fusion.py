import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hcrfplus.errors import InvalidInputError, NumericalFailureError
from hcrfplus.fusion import FusionModel, fit_fusion, predict_privileged, select_eta_cv


def test_exact_proportionality():
    m = fit_fusion([[1.0], [2.0]], [[2.0], [4.0]], 0.0)
    assert m.gamma[0, 0] == 2.0
    np.testing.assert_array_equal(predict_privileged(m, [3.0]), [6.0])
    np.testing.assert_array_equal(predict_privileged(m, [0.0]), [0.0])


def test_ridge_hand_value():
    m = fit_fusion([[1.0], [2.0]], [[2.0], [4.0]], 1.0)
    assert m.gamma[0, 0] == pytest.approx(10 / 6, abs=1e-15)


def test_normal_equation_residual():
    rng = np.random.default_rng(0)
    X, XS = rng.normal(size=(50, 4)), rng.normal(size=(50, 3))
    for eta in (0.0, 1e-4, 0.3, 1.0):
        g = fit_fusion(X, XS, eta).gamma
        resid = (X.T @ X + eta * np.eye(4)) @ g - X.T @ XS
        assert np.max(np.abs(resid)) <= 1e-9


def test_prediction_matches_dot_products():
    rng = np.random.default_rng(1)
    m = fit_fusion(rng.normal(size=(30, 5)), rng.normal(size=(30, 2)), 0.1)
    x = rng.normal(size=5)
    ref = [sum(x[i] * m.gamma[i, j] for i in range(5)) for j in range(2)]
    np.testing.assert_allclose(predict_privileged(m, x), ref, atol=1e-14)


def test_errors():
    with pytest.raises(NumericalFailureError, match="eta > 0"):
        fit_fusion([[1.0, 1.0], [2.0, 2.0]], [[1.0], [2.0]], 0.0)
    with pytest.raises(InvalidInputError):
        fit_fusion([[1.0]], [[1.0], [2.0]], 0.0)
    m = FusionModel(np.ones((2, 1)), 0.1)
    with pytest.raises(InvalidInputError):
        predict_privileged(m, [1.0, 2.0, 3.0])


def test_cv_noiseless_picks_smallest():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 3))
    XS = X @ rng.normal(size=(3, 2))
    assert select_eta_cv(X, XS, folds=5) == pytest.approx(1e-4)


def test_cv_pure_noise_picks_largest():
    rng = np.random.default_rng(3)
    X, XS = rng.normal(size=(40, 6)), rng.normal(size=(40, 2))
    assert select_eta_cv(X, XS, folds=5) == pytest.approx(1.0)


def test_cv_determinism_and_errors():
    rng = np.random.default_rng(4)
    X, XS = rng.normal(size=(25, 3)), rng.normal(size=(25, 2))
    assert select_eta_cv(X, XS, seed=7) == select_eta_cv(X, XS, seed=7)
    with pytest.raises(InvalidInputError):
        select_eta_cv(X[:3], XS[:3], folds=5)
    with pytest.raises(InvalidInputError):
        select_eta_cv(X, XS, folds=1)
    with pytest.raises(InvalidInputError):
        select_eta_cv(X, XS, grid=[])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), e1=st.floats(0, 10), e2=st.floats(0, 10))
def test_shrinkage(seed, e1, e2):
    rng = np.random.default_rng(seed)
    X, XS = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    lo, hi = sorted((e1, e2))
    g_lo = fit_fusion(X, XS, lo).gamma
    g_hi = fit_fusion(X, XS, hi).gamma
    assert np.linalg.norm(g_hi) <= np.linalg.norm(g_lo) + 1e-12
