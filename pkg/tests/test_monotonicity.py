import numpy as np
import pytest

from conftest import random_lq, reference_lq
from mfglab.errors import ConfigurationError
from mfglab.hamiltonian import Theta
from mfglab.model import LQCoefficients, lq_coefficients
from mfglab.monotonicity import (certify, drift_monotonicity_gap, drift_monotonicity_terms,
                                 replay_witness, terminal_monotonicity_gap)


def scalar(**kw):
    base = dict(A=0.3, B=1.0, Q=1.0, Qbar=1.0, S=0.0, P=1.0, c1=1.0)
    base.update(kw)
    return lq_coefficients(LQCoefficients.build(**base), require_valid=False)


def cloud(rng, U, n=1, d=1, scale=1.0):
    return Theta(scale * rng.standard_normal((U, n)), scale * rng.standard_normal((U, n)),
                 scale * rng.standard_normal((U, n, d)), scale * rng.standard_normal((U, n, d)))


def test_identical_clouds_give_zero():
    rng = np.random.default_rng(0)
    a = cloud(rng, 5)
    assert drift_monotonicity_gap(scalar(), 0, (a, a)) == 0.0
    assert terminal_monotonicity_gap(scalar(), (a.x, a.x)) == 0.0


def test_drift_gap_scalar_example():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((7, 1))
    zero = np.zeros((7, 1))
    a = Theta(x, zero, zero[..., None], zero[..., None])
    b = Theta(zero, zero, zero[..., None], zero[..., None])
    assert drift_monotonicity_gap(scalar(), 0, (a, b)) == pytest.approx(-2.0, abs=1e-12)


def test_pure_adjoint_perturbation_numerator_nonpositive():
    c = scalar(Pbar=0.0, c2=1.0)
    rng = np.random.default_rng(2)
    for _ in range(2000):
        a = cloud(rng, 2, scale=np.exp(rng.uniform(-2, 2)))
        b = Theta(a.x, rng.standard_normal((2, 1)), rng.standard_normal((2, 1, 1)),
                  rng.standard_normal((2, 1, 1)))
        num, den = drift_monotonicity_terms(c, 0, (a, b))
        assert den == 0.0
        assert num <= 1e-12


def test_terminal_gap_examples():
    rng = np.random.default_rng(3)
    c = scalar(QT=1.0, QbarT=1.0, ST=0.0)
    for U in (2, 5, 30):
        x, xp = rng.standard_normal((U, 1)), rng.standard_normal((U, 1))
        assert terminal_monotonicity_gap(c, (x, xp)) == pytest.approx(2.0, abs=1e-12)
    bad = scalar(QT=-1.0, QbarT=0.0)
    assert terminal_monotonicity_gap(bad, (rng.standard_normal((4, 1)), np.zeros((4, 1)))) < 0


def test_degenerate_denominator_sentinel():
    c = scalar(c2=0.0)
    x = np.zeros((2, 1))
    a = Theta(x, np.ones((2, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))
    b = Theta(x, -np.ones((2, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1, 1)))
    # same states, different adjoints: dY.dB = -c1^2 |dY|^2 / P < 0
    assert drift_monotonicity_gap(c, 0, (a, b)) == -np.inf


def test_certify_reference_model():
    c = lq_coefficients(reference_lq())
    rep = certify(c, 600, seed=4)
    assert rep.passed and rep.exact
    lam = 2.0
    assert rep.estimated_CG >= lam - 1e-9
    assert rep.estimated_CH >= lam - 1e-9
    assert rep.verdict() == "verified (LQ structure)"


def test_lq_gaps_respect_lambda_on_random_valid_models():
    rng = np.random.default_rng(5)
    for _ in range(5):
        lq = random_lq(rng)
        c = lq_coefficients(lq)
        lam = float(np.linalg.eigvalsh(lq.at("Q", 0) + lq.at("Qbar", 0)).min())
        rep = certify(c, 90, seed=int(rng.integers(1000)))
        assert rep.passed
        assert rep.estimated_CH >= lam - 1e-9


def test_certify_finds_violation_for_indefinite_costs():
    c = lq_coefficients(reference_lq(Q=-1.0), require_valid=False)
    rep = certify(c, 300, seed=6)
    assert not rep.passed
    assert rep.witness is not None
    assert rep.verdict() == "violation found"


def test_certify_deterministic_and_witness_replays():
    c = scalar(S=-0.5)
    r1, r2 = certify(c, 200, seed=9), certify(c, 200, seed=9)
    assert (r1.estimated_CH, r1.estimated_CG) == (r2.estimated_CH, r2.estimated_CG)
    dm, tm = replay_witness(c, r1)
    assert abs(dm - r1.min_drift_margin) <= 1e-12
    assert abs(tm - r1.min_terminal_margin) <= 1e-12
    assert certify(c, 200, seed=10).estimated_CH != r1.estimated_CH


def test_trials_must_be_positive():
    with pytest.raises(ConfigurationError):
        certify(scalar(), 0)
