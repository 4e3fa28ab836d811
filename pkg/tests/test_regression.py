import numpy as np
import pytest

from mfglab.regression import Projection, affine_features, make_features, quadratic_features


def test_affine_target_recovered_exactly():
    rng = np.random.default_rng(0)
    x, m = rng.standard_normal((500, 2)), rng.standard_normal((500, 1))
    F = affine_features([x, m])
    beta = np.array([[0.5], [1.0], [-2.0], [3.0]])
    coef = Projection(F).fit(F @ beta)
    assert np.abs(coef - beta).max() <= 1e-10


def test_matches_lstsq_on_noisy_targets():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((400, 3)) * [1.0, 10.0, 0.01] + [5.0, 0.0, -3.0]
    F = affine_features([x])
    T = rng.standard_normal((400, 2)) + x[:, :2]
    coef = Projection(F).fit(T)
    ref = np.linalg.lstsq(F, T, rcond=None)[0]
    assert np.allclose(coef, ref, atol=1e-8)
    resid = T - F @ coef
    # normal equations: residual orthogonal to every feature
    assert np.abs(F.T @ resid).max() <= 1e-8 * len(T)


def test_constant_column_absorbed_by_intercept():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 1))
    F = affine_features([x, np.full((200, 1), 4.0)])
    proj = Projection(F)
    assert list(proj.cols) == [1]
    coef = proj.fit(2.0 + 3.0 * x)
    assert np.allclose(F @ coef, 2.0 + 3.0 * x, atol=1e-12)
    assert coef[2, 0] == 0.0


def test_collinear_features_are_ridged():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((200, 1))
    proj = Projection(affine_features([x, 2.0 * x]))
    assert proj.ridged
    coef = proj.fit(x)
    assert np.allclose(proj.fitted(coef), x, atol=1e-6)


def test_all_constant_features_give_the_mean():
    F = affine_features([np.ones((10, 2))])
    T = np.arange(10.0)[:, None]
    coef = Projection(F).fit(T)
    assert np.allclose(F @ coef, 4.5)


def test_quadratic_features_layout():
    x = np.array([[2.0, 3.0]])
    F = quadratic_features([x])
    assert F.tolist() == [[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]]
    assert make_features([x], "affine").shape == (1, 3)
    with pytest.raises(ValueError):
        make_features([x], "cubic")
