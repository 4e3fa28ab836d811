import numpy as np
import pytest

from conftest import random_lq, reference_lq
from mfglab.diagnostics import hamiltonian_fd_errors
from mfglab.errors import SolverError
from mfglab.hamiltonian import (Theta, eval_H, foc_residual, hamiltonian, minimize_H,
                                reduced_coefficients, terminal_G)
from mfglab.measures import EmpiricalMeasure
from mfglab.model import LQCoefficients, lq_coefficients


def scalar(**kw):
    base = dict(A=0.0, B=1.0, Q=1.0, P=1.0, c1=1.0)
    base.update(kw)
    return lq_coefficients(LQCoefficients.build(**base), require_valid=False)


def point(x=0.0, y=0.0, z=0.0, z0=0.0):
    return Theta(np.array([x]), np.array([y]), np.array([[z]]), np.array([[z0]]))


def zero_model():
    base = scalar()
    zf = lambda k, x, a, mu, nu: np.zeros(x.shape[:-1])
    zv = lambda k, x, a, mu, nu: np.zeros(x.shape)
    zs = lambda k, x, a, mu, nu: np.zeros(x.shape + (1,))
    return base.with_(f=zf, b=zv, sigma=zs, sigma0=zs)


def test_eval_H_examples():
    xi = EmpiricalMeasure(np.array([[0.3, 0.1]]))
    assert eval_H(zero_model(), 0, point(1, 2, 3, 4), np.array([0.5]), xi) == 0.0
    unit_b = zero_model().with_(b=lambda k, x, a, mu, nu: np.ones(x.shape))
    assert eval_H(unit_b, 0, point(0, 1), np.array([0.0]), xi) == 1.0
    c = scalar(A=1.0, C=1.0, D=1.0, C0=1.0, D0=1.0)
    nu = EmpiricalMeasure(np.array([[5.0, -3.0]]))
    assert eval_H(c, 0, point(1, 1, 1, 1), np.array([1.0]), nu) == 7.0


def test_minimize_examples():
    mu = np.zeros((1, 1))
    assert minimize_H(scalar(c1=0.0), 0, point(1, 2, 3, 4), mu)[0] == 0.0
    assert minimize_H(scalar(P=2.0), 0, point(0, 3.0), mu)[0] == -1.5
    assert minimize_H(scalar(), 0, point(), mu, zeta=np.array([4.0]))[0] == -4.0


def test_minimize_matches_grid_search():
    c = scalar()
    grid = np.linspace(-10, 10, 200001)[:, None]
    th = Theta(np.zeros((grid.shape[0], 1)), np.zeros((grid.shape[0], 1)),
               np.zeros((grid.shape[0], 1, 1)), np.zeros((grid.shape[0], 1, 1)))
    vals = hamiltonian(c, 0, th, grid, np.zeros((1, 1)), np.zeros((1, 1))) + 4.0 * grid[:, 0]
    assert abs(grid[np.argmin(vals), 0] - (-4.0)) <= 1e-4


def test_foc_examples():
    mu = np.zeros((1, 1))
    c = scalar()
    assert foc_residual(c, 0, point(), mu, np.array([0.0]), np.array([1.0])) == 1.0
    rng = np.random.default_rng(0)
    th = Theta(*[rng.standard_normal(s) for s in ((1,), (1,), (1, 1), (1, 1))])
    a = minimize_H(c, 0, th, mu, np.array([0.3]))
    assert foc_residual(c, 0, th, mu, np.array([0.3]), a) <= 1e-10
    shifted = c.with_(f=lambda k, x, a_, m, n: c.f(k, x, a_, m, n) + 7.0)
    assert foc_residual(shifted, 0, th, mu, np.array([0.3]), a + 0.2) == \
        foc_residual(c, 0, th, mu, np.array([0.3]), a + 0.2)


def _random_batch(rng, c, P=100, U=5):
    th = Theta(rng.standard_normal((P, c.n)), rng.standard_normal((P, c.n)),
               rng.standard_normal((P, c.n, c.d)), rng.standard_normal((P, c.n, c.d)))
    return th, rng.standard_normal((U, c.n)), rng.standard_normal((P, c.l))


def test_closed_form_equals_newton():
    rng = np.random.default_rng(1)
    c = lq_coefficients(random_lq(rng))
    th, mu, zeta = _random_batch(rng, c)
    a_cf = minimize_H(c, 0, th, mu, zeta)
    a_nt = minimize_H(c, 0, th, mu, zeta, method="newton")
    assert np.abs(a_cf - a_nt).max() <= 1e-9
    no_hess = c.with_(daa_H=None, minimizer=None)
    assert np.abs(minimize_H(no_hess, 0, th, mu, zeta) - a_cf).max() <= 1e-9


def test_newton_failure_reports():
    c = scalar().with_(minimizer=None)
    with pytest.raises(SolverError, match="non-finite|Newton"):
        minimize_H(c, 0, point(0, 1e300), np.zeros((1, 1)), max_iter=0)


def _shifted_H(c, th, a, mu, zeta):
    nu = np.zeros((mu.shape[0], c.l))
    return hamiltonian(c, 0, th, a, mu, nu) + np.sum(a * zeta, axis=-1)


def test_minimizer_strong_convexity():
    """``H(a) - H(a*) >= (gamma / 2)|a - a*|^2`` (the quadratic growth of a gamma-convex map)."""
    rng = np.random.default_rng(2)
    c = lq_coefficients(random_lq(rng))
    for _ in range(100):
        th, mu, zeta = _random_batch(rng, c, P=1)
        a_star = minimize_H(c, 0, th, mu, zeta)
        probes = a_star + rng.standard_normal((20, c.l)) * 2
        thp = th.map(lambda v: np.repeat(v, 20, axis=0))
        gap = _shifted_H(c, thp, probes, mu, zeta) - _shifted_H(c, th, a_star, mu, zeta)
        bound = 0.5 * c.gamma * np.sum((probes - a_star) ** 2, axis=-1)
        assert np.all(gap >= bound - 1e-9)


def test_full_gamma_bound_is_not_attainable_for_lq():
    """For LQ the gap is exactly half the P-norm, so a bound with the full gamma fails."""
    c = scalar(P=2.0)
    mu = np.zeros((1, 1))
    th = point(0.0, 1.0)
    a_star = minimize_H(c, 0, th, mu)
    probe = a_star + 1.0
    gap = (_shifted_H(c, th.map(lambda v: v[None]), probe[None], mu, 0.0)
           - _shifted_H(c, th.map(lambda v: v[None]), a_star[None], mu, 0.0))[0]
    assert np.isclose(gap, 0.5 * c.gamma)
    assert gap < c.gamma


@pytest.mark.parametrize("which", ["reference", "random"])
def test_gradient_checks(which):
    rng = np.random.default_rng(3)
    c = lq_coefficients(reference_lq(S=-0.5) if which == "reference" else random_lq(rng))
    errs = hamiltonian_fd_errors(c, rng)
    assert max(errs.values()) <= 1e-6, errs


def test_reduced_coefficients_examples():
    rng = np.random.default_rng(4)
    lq = LQCoefficients.build(A=0.7, B=1.3, C=0.4, C0=-0.2, Q=1.1, Qbar=0.6, S=-0.5, P=2.0,
                              c1=0.0, c2=0.0)
    c = lq_coefficients(lq)
    x = rng.standard_normal((6, 1))
    zero = np.zeros((6, 1))
    th = Theta(x, zero, zero[..., None], zero[..., None])
    r = reduced_coefficients(c, 0, th)
    m = x.mean()
    assert np.allclose(r.B, 0.7 * x, rtol=0, atol=1e-15)
    assert np.allclose(r.Sigma[..., 0], 0.4 * x, atol=1e-15)
    assert np.allclose(r.Sigma0[..., 0], -0.2 * x, atol=1e-15)
    assert np.allclose(r.F, (1.1 + 0.6) * x - 0.6 * (-0.5) * m, atol=1e-14)
    anyc = lq_coefficients(random_lq(rng))
    zth = Theta.zeros((1,), 2, 2)
    r0 = reduced_coefficients(anyc, 0, zth)
    for v in (r0.B, r0.Sigma, r0.Sigma0, r0.F):
        assert np.all(v == 0)


def test_reduced_coefficients_against_explicit_lq_formulas():
    rng = np.random.default_rng(5)
    lq = random_lq(rng)
    c = lq_coefficients(lq)
    P_inv = np.linalg.inv(lq.P)
    for _ in range(100):
        th = Theta(rng.standard_normal((4, 2)), rng.standard_normal((4, 2)),
                   rng.standard_normal((4, 2, 2)), rng.standard_normal((4, 2, 2)))
        r = reduced_coefficients(c, 0, th)
        # explicit control, drift and driver of the LQ game, atom by atom
        lam = np.array([-lq.c1 * P_inv @ (lq.B.T @ th.y[i]
                                          + np.einsum("iqm,iq->m", lq.D, th.z[i])
                                          + np.einsum("iqm,iq->m", lq.D0, th.z0[i]))
                        for i in range(4)])
        nb, m = lam.mean(axis=0), th.x.mean(axis=0)
        for i in range(4):
            u = lq.c1 * lam[i] - lq.c2 * nb
            B = lq.A @ th.x[i] + lq.B @ u
            Sig = np.einsum("iqj,j->iq", lq.C, th.x[i]) + np.einsum("iqm,m->iq", lq.D, u)
            F = (lq.Q @ th.x[i] + lq.Qbar @ (th.x[i] - lq.S @ m) + lq.A.T @ th.y[i]
                 + np.einsum("iqj,iq->j", lq.C, th.z[i]) + np.einsum("iqj,iq->j", lq.C0, th.z0[i]))
            assert np.allclose(r.B[i], B, atol=1e-12)
            assert np.allclose(r.Sigma[i], Sig, atol=1e-12)
            assert np.allclose(r.F[i], F, atol=1e-12)


def test_terminal_G_examples():
    c = scalar(QT=1.0, QbarT=1.0, ST=0.0)
    assert terminal_G(c, np.array([0.0]), np.zeros((1, 1)))[0] == 0.0
    assert terminal_G(c, np.array([2.0]), np.zeros((1, 1)))[0] == 4.0


def test_terminal_G_finite_differences():
    rng = np.random.default_rng(6)
    c = lq_coefficients(random_lq(rng))
    mu = rng.standard_normal((5, 2))
    h = 1e-5
    for _ in range(100):
        x = rng.standard_normal((1, 2))
        fd = np.array([(c.g(x + h * e, mu) - c.g(x - h * e, mu))[0] / (2 * h) for e in np.eye(2)])
        G = terminal_G(c, x, mu)[0]
        assert np.abs(fd - G).max() <= 1e-6 * max(1.0, np.abs(G).max())
