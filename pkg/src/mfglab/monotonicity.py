"""Randomised falsification of the drift and terminal monotonicity conditions.

A sampled cloud is a pair of aligned atom sets ``(Theta_m, Theta'_m)``; their
empirical laws play the roles of the two laws in the monotonicity
inequalities.  Sampling can refute monotonicity but never prove it for a
general model; for the LQ game the inequalities follow from the matrix
conditions checked by :func:`mfglab.model.validate_lq`.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .hamiltonian import Theta, reduced_coefficients, terminal_G
from .noise import stream

ROLE_MONO = 4
FAMILIES = ("independent", "state", "adjoint")


@dataclass
class MonotonicityReport:
    trials: int
    min_drift_margin: float
    min_terminal_margin: float
    estimated_CH: float
    estimated_CG: float
    passed: bool
    witness: Optional[dict] = None
    exact: bool = False
    details: dict = field(default_factory=dict)

    def verdict(self):
        if not self.passed:
            return "violation found"
        return "verified (LQ structure)" if self.exact else "no violation found"


def _as_theta(obj, coeffs):
    if isinstance(obj, Theta):
        return obj
    return Theta.from_flat(np.asarray(obj, dtype=float), coeffs.n, coeffs.d)


def _ratio(num, den):
    if den > 0:
        return num / den
    if num > 0:
        return np.inf
    if num < 0:
        return -np.inf
    return 0.0


def drift_monotonicity_terms(coeffs, t, cloud):
    """Numerator and denominator of the drift gap for a paired cloud."""
    th, tp = (_as_theta(c, coeffs) for c in cloud)
    r, rp = reduced_coefficients(coeffs, t, th), reduced_coefficients(coeffs, t, tp)
    dx, dy, dz, dz0 = th.x - tp.x, th.y - tp.y, th.z - tp.z, th.z0 - tp.z0
    num = (-np.sum(dx * (r.F - rp.F)) + np.sum(dy * (r.B - rp.B))
           + np.sum(dz * (r.Sigma - rp.Sigma)) + np.sum(dz0 * (r.Sigma0 - rp.Sigma0)))
    U = dx.shape[0]
    return float(num / U), float(np.sum(dx * dx) / U)


def drift_monotonicity_gap(coeffs, t, cloud):
    """``E[-dX.dF + dY.dB + dZ:dSigma + dZ0:dSigma0] / E|dX|^2``.

    ``cloud`` is a pair of :class:`Theta` (or flat atom arrays) with aligned
    atoms.  When ``E|dX|^2 = 0`` the result is ``0`` if the numerator
    vanishes and ``+-inf`` (its sign) otherwise.
    """
    return _ratio(*drift_monotonicity_terms(coeffs, t, cloud))


def terminal_monotonicity_terms(coeffs, cloud):
    x, xp = (np.asarray(c, dtype=float) for c in cloud)
    if x.ndim == 1:
        x, xp = x[:, None], xp[:, None]
    G, Gp = terminal_G(coeffs, x, x), terminal_G(coeffs, xp, xp)
    dx = x - xp
    U = dx.shape[0]
    return float(np.sum(dx * (G - Gp)) / U), float(np.sum(dx * dx) / U)


def terminal_monotonicity_gap(coeffs, cloud):
    """``E[dX.dG] / E|dX|^2`` for paired state atoms (``0/0`` is 0)."""
    return _ratio(*terminal_monotonicity_terms(coeffs, cloud))


def _sample(rng, coeffs, U, family):
    n, d = coeffs.n, coeffs.d
    scale = np.exp(rng.uniform(np.log(0.1), np.log(10.0)))

    def draw():
        return Theta(scale * rng.standard_normal((U, n)), scale * rng.standard_normal((U, n)),
                     scale * rng.standard_normal((U, n, d)),
                     scale * rng.standard_normal((U, n, d)))

    a, b = draw(), draw()
    if family == "state":
        b = Theta(b.x, a.y, a.z, a.z0)
    elif family == "adjoint":
        b = Theta(a.x, b.y, b.z, b.z0)
    return a, b


def certify(coeffs, trials, atoms_per_cloud=None, seed=0, nodes=(0,)):
    """Search random paired clouds for violations.

    Trials cycle through three families: independent clouds, pure state
    perturbations (shared adjoints) and pure adjoint perturbations (shared
    states).  Each trial uses its own stream keyed by ``(seed, trial)`` and
    a random atom count in ``[2, 64]`` unless ``atoms_per_cloud`` is given.

    ``estimated_CH`` is minus the largest drift gap seen, ``estimated_CG``
    the smallest terminal gap; ``passed`` iff both are strictly positive.
    """
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    nodes = list(nodes)
    worst_drift, worst_term = -np.inf, np.inf
    w_drift = w_term = None
    for tr in range(trials):
        rng = stream(seed, ROLE_MONO, tr)
        U = int(atoms_per_cloud) if atoms_per_cloud else int(rng.integers(2, 65))
        fam = FAMILIES[tr % len(FAMILIES)]
        k = nodes[int(rng.integers(len(nodes)))]
        a, b = _sample(rng, coeffs, U, fam)
        gd = drift_monotonicity_gap(coeffs, k, (a, b))
        if gd > worst_drift or w_drift is None:
            worst_drift = gd
            w_drift = {"t": k, "trial": tr, "family": fam, "cloud": (a, b)}
        if fam != "adjoint":
            gt = terminal_monotonicity_gap(coeffs, (a.x, b.x))
            if gt < worst_term or w_term is None:
                worst_term = gt
                w_term = {"trial": tr, "family": fam, "cloud": (a.x, b.x)}
    if w_term is None:
        # only adjoint trials were drawn; use the last state clouds
        a, b = _sample(stream(seed, ROLE_MONO, trials), coeffs, 2, "independent")
        worst_term = terminal_monotonicity_gap(coeffs, (a.x, b.x))
        w_term = {"trial": trials, "family": "independent", "cloud": (a.x, b.x)}
    CH, CG = -worst_drift, worst_term
    passed = bool(CH > 0 and CG > 0)
    exact = passed and "lq" in coeffs.tags
    return MonotonicityReport(trials, CH, CG, CH, CG, passed,
                              {"drift": w_drift, "terminal": w_term}, exact)


def replay_witness(coeffs, report):
    """Re-evaluate the stored witness clouds: ``(drift margin, terminal margin)``."""
    wd, wt = report.witness["drift"], report.witness["terminal"]
    return (-drift_monotonicity_gap(coeffs, wd["t"], wd["cloud"]),
            terminal_monotonicity_gap(coeffs, wt["cloud"]))
