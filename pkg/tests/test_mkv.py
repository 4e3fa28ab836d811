import numpy as np
import pytest

from conftest import reference_lq
from mfglab.errors import ConfigurationError, ConvergenceError, DivergenceError
from mfglab.hamiltonian import foc_residual, terminal_G
from mfglab.measures import _canonical
from mfglab.mkv import (ContinuationConfig, DecouplingField, MkvConfig, backward_regress,
                        continuation_solve, extract_mfe, forward_step, h2_distance,
                        picard_solve, solve)
from mfglab.model import LQCoefficients, lq_coefficients
from mfglab.noise import InitialLaw, make_time_grid, permute_players, sample_noise


@pytest.fixture(scope="module")
def setting():
    g = make_time_grid(1.0, 20)
    b = sample_noise(g, 256, 1, InitialLaw.gaussian([1.0], [[0.25]]), 17, worlds=8)
    c = lq_coefficients(reference_lq(), g)
    return g, b, c


@pytest.fixture(scope="module")
def ref_solution(setting):
    g, b, c = setting
    return picard_solve(c, MkvConfig(g, 8, 256, damping=0.8, picard_tol=1e-8), b)


def lq(grid=None, valid=False, **kw):
    return lq_coefficients(LQCoefficients.build(**kw), grid, require_valid=valid)


def test_config_rejects_bad_values(grid50):
    with pytest.raises(ConfigurationError) as err:
        MkvConfig(grid50, 0, 1, damping=1.5)
    assert len(err.value.violations) == 2


def test_bundle_too_small(setting):
    g, b, c = setting
    with pytest.raises(ConfigurationError):
        picard_solve(c, MkvConfig(g, 16, 64), b)


def test_zero_model_converges_after_one_update(setting):
    g, b, _ = setting
    z = lq(A=0, B=0, Q=0, P=1, c1=0, QT=1)
    one = picard_solve(z, MkvConfig(g, 4, 64, damping=1.0, max_picard=1), b)
    th = one.theta
    assert np.all(th.X == th.X[0])
    assert np.abs(th.Y - th.X[-1]).max() <= 1e-12
    assert np.abs(th.Z).max() <= 1e-12 and np.abs(th.Z0).max() <= 1e-12
    two = picard_solve(z, MkvConfig(g, 4, 64, damping=1.0, max_picard=2), b)
    assert two.converged and two.residual_history[-1] == 0.0


def test_forward_recursion_without_noise_or_control(setting):
    g, b, _ = setting
    c = lq(A=0.7, B=1, Q=1, P=1, c1=0)
    X, _ = forward_step(c, DecouplingField.zeros(g.K, 1, 1, "affine"), b)
    assert np.allclose(X[1:], (1 + 0.7 * g.dt) * X[:-1], rtol=0, atol=1e-14)
    exact = np.exp(0.7 * g.T) * X[0]
    rel = np.abs(X[-1] - exact) / np.abs(exact)
    assert rel.max() <= 2 * 0.7 ** 2 * g.T * g.dt


def test_constant_terminal_gives_constant_adjoint(setting):
    g, b, _ = setting
    c = lq(A=0.2, B=1, C=0.3, C0=0.3, Q=0, P=1, c1=0, QT=0)
    X, _ = forward_step(c, DecouplingField.zeros(g.K, 1, 1, "affine"), b)
    fld, _ = backward_regress(c, X, b)
    assert np.abs(fld.coef).max() <= 1e-12


def test_zero_noise_gives_zero_integrands(setting):
    g, b, _ = setting
    c = lq(g, True, A=0.2, B=1, Q=1, P=1, c1=1)
    sol = picard_solve(c, MkvConfig(g, 2, 8, damping=0.8, picard_tol=1e-10), b)
    # zero volatility: the increments multiply a residual with no spread
    assert np.abs(sol.theta.Z).max() <= 1e-8 and np.abs(sol.theta.Z0).max() <= 1e-8


def test_reference_solve_properties(setting, ref_solution):
    g, b, c = setting
    sol = ref_solution
    assert sol.converged and sol.complete
    hist = sol.residual_history
    assert hist[-1] <= 1e-8
    assert all(b_ < a_ for a_, b_ in zip(hist[1:], hist[2:]))
    # terminal consistency holds exactly
    XK = sol.theta.X[-1]
    assert np.array_equal(sol.theta.Y[-1], terminal_G(c, XK, XK))
    # discrete martingale residual of the backward equation
    assert np.linalg.norm(sol.martingale, axis=-1).max() <= 5 / np.sqrt(256)


def test_controls_satisfy_first_order_condition(setting, ref_solution):
    g, b, c = setting
    alpha, flow = extract_mfe(ref_solution)
    th = ref_solution.theta
    worst = 0.0
    for k in range(g.K):
        tk = th.theta(k)
        worst = max(worst, float(np.max(foc_residual(c, k, tk, tk.x, None, alpha[k]))))
    assert worst <= 1e-10
    law = flow(3, 5)
    assert law.size == 256 and law.dim == 2


def test_no_control_weight_means_zero_control(setting):
    g, b, _ = setting
    c = lq(g, False, A=0.2, B=1, C=0.1, Q=1, Qbar=1, P=1, c1=0)
    sol = picard_solve(c, MkvConfig(g, 2, 64, damping=0.8), b)
    assert np.all(sol.alpha == 0)
    assert np.all(sol.measure(0, 3).points[:, 1] == 0)


def test_independent_starts_agree(setting, ref_solution):
    g, b, c = setting
    rnd = picard_solve(c, MkvConfig(g, 8, 256, damping=0.8, picard_tol=1e-8), b,
                       initial="random", init_seed=3)
    assert rnd.converged
    assert h2_distance(rnd.theta, ref_solution.theta, g) <= 10 * 1e-8


def test_particle_relabelling_leaves_conditional_law(setting, ref_solution):
    g, b, c = setting
    perm = np.random.default_rng(0).permutation(b.paths)
    sol = picard_solve(c, MkvConfig(g, 8, 256, damping=0.8, picard_tol=1e-8),
                       permute_players(b, perm))
    for w in (0, 7):
        for k in (0, 10, g.K):
            a = _canonical(ref_solution.measure(w, k).points)
            p = _canonical(sol.measure(w, k).points)
            assert np.abs(a - p).max() <= 1e-9
    assert np.allclose(sol.theta.X[:, :, :], ref_solution.theta.X[:, :, perm], atol=1e-9)


def test_keep_stores_a_prefix(setting, ref_solution):
    g, b, c = setting
    part = picard_solve(c, MkvConfig(g, 8, 256, damping=0.8, picard_tol=1e-8), b, keep=5)
    assert not part.complete
    assert np.array_equal(part.theta.X, ref_solution.theta.X[:, :, :5])
    with pytest.raises(ValueError):
        part.measure(0, 0)


def test_decoupled_system_and_continuation(setting, ref_solution):
    g, b, c = setting
    cfg = MkvConfig(g, 8, 256, damping=0.8, picard_tol=1e-8)
    zero = picard_solve(c, cfg, b)  # warm reference
    from mfglab.mkv import _picard, _prepare_bundle
    out = _picard(c, cfg, _prepare_bundle(b, cfg), "zero", 0, 0.0)
    assert out[4] and len(out[2]) <= cfg.max_picard
    cont = continuation_solve(c, cfg, b)
    assert cont.trace[-1] == (1.0, True)
    assert h2_distance(cont.theta, zero.theta, g) <= 10 * 1e-8


def test_continuation_failure_reports_trace():
    g = make_time_grid(1.0, 10)
    b = sample_noise(g, 32, 1, InitialLaw.gaussian([1.0], [[0.25]]), 2, worlds=2)
    bad = lq(g, False, A=0.2, B=1, C=0.1, D=0.1, Q=-10, P=1, c1=1, QT=-10)
    cfg = MkvConfig(g, 2, 32, max_picard=20,
                    continuation=ContinuationConfig(True, 0.25, 1e-4))
    with pytest.raises(ConvergenceError) as err:
        continuation_solve(bad, cfg, b)
    trace = err.value.trace
    assert trace and not trace[-1][1]
    assert any(ok for _, ok in trace)


def test_solve_falls_back_to_continuation(setting):
    g, b, c = setting
    cfg = MkvConfig(g, 4, 64, damping=0.8, max_picard=2, picard_tol=1e-8)
    direct = picard_solve(c, cfg, b)
    assert not direct.converged
    fallback = solve(c, MkvConfig(g, 4, 64, damping=0.8, max_picard=200, picard_tol=1e-8), b)
    assert fallback.converged


def test_divergence_guard(setting):
    g, b, _ = setting
    c = lq(A=2000.0, B=1, Q=1, P=1, c1=0)
    with pytest.raises(DivergenceError):
        picard_solve(c, MkvConfig(g, 2, 8, max_picard=3, divergence_bound=1e8), b)
