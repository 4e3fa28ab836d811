import pathlib

import numpy as np
import pytest

from mfglab.model import LQCoefficients, lq_coefficients
from mfglab.noise import InitialLaw, make_time_grid

CONFIGS = pathlib.Path(__file__).resolve().parent.parent / "configs"

REFERENCE = dict(A=0.2, B=1.0, C=0.1, D=0.1, C0=0.1, D0=0.1, Q=1.0, Qbar=1.0, P=1.0,
                 Pbar=0.5, S=0.0, c1=1.0, c2=0.5)


def reference_lq(**changes):
    kw = dict(REFERENCE)
    kw.update(changes)
    return LQCoefficients.build(**kw)


def random_lq(rng, n=2, l=2, d=2, scale=0.5):
    """Generic (non-symmetric-structure) LQ game with valid P."""
    def sym(k, shift):
        m = rng.standard_normal((k, k)) * scale
        return m @ m.T + shift * np.eye(k)
    return LQCoefficients.build(
        A=rng.standard_normal((n, n)) * scale, B=rng.standard_normal((n, l)) * scale,
        C=rng.standard_normal((n, d, n)) * scale, D=rng.standard_normal((n, d, l)) * scale,
        C0=rng.standard_normal((n, d, n)) * scale, D0=rng.standard_normal((n, d, l)) * scale,
        Q=sym(n, 1.0), Qbar=sym(n, 0.5), S=-np.eye(n) * 0.3, P=sym(l, 1.0), Pbar=sym(l, 0.2),
        c1=1.0, c2=0.4, QT=sym(n, 1.0), QbarT=sym(n, 0.3), ST=-np.eye(n) * 0.2, d=d)


@pytest.fixture
def grid50():
    return make_time_grid(1.0, 50)


@pytest.fixture
def mu0():
    return InitialLaw.gaussian([1.0], [[0.25]])


@pytest.fixture
def ref_coeffs(grid50):
    return lq_coefficients(reference_lq(), grid50)
