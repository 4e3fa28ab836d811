"""Finite-difference consistency checks for coefficient sets and the Hamiltonian.

Measure derivatives are checked through their empirical form: moving atom
``v`` of a ``U``-atom cloud changes a functional at rate
``(1/U) dmu F(.)(u_v)``.  Slots left as ``None`` are checked to vanish.
"""
import numpy as np

from .hamiltonian import Theta, da_H, dx_H, hamiltonian

RUNNING = ("b", "sigma", "sigma0", "f")


def _fd(fun, base, h):
    """Central differences of ``fun`` w.r.t. every entry of the last axis of ``base``.

    Returns ``(..., out..., m)`` stacked on a trailing axis.
    """
    cols = []
    for j in range(base.shape[-1]):
        e = np.zeros_like(base)
        e[..., j] = h
        cols.append((fun(base + e) - fun(base - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel(fd, an):
    an = np.broadcast_to(an, fd.shape)
    lead = fd.shape[0]
    err = np.abs(fd - an).reshape(lead, -1).max(axis=1)
    scale = np.maximum(1.0, np.abs(an).reshape(lead, -1).max(axis=1))
    return float((err / scale).max())


def _sample(coeffs, rng, points, atoms):
    n, l = coeffs.n, coeffs.l
    return (rng.standard_normal((points, 1, n)), rng.standard_normal((points, 1, l)),
            rng.standard_normal((points, atoms, n)), rng.standard_normal((points, atoms, l)))


def _atom_fd(fun, cloud, v, h):
    """Derivative of ``fun(cloud)`` w.r.t. atom ``v`` of ``cloud``."""
    def moved(c_v):
        c = cloud.copy()
        c[:, v] = c_v
        return fun(c)
    return _fd(moved, cloud[:, v].copy(), h)


def coefficient_fd_errors(coeffs, rng, points=100, atoms=4, h=1e-5, k=0):
    """Largest relative error of every derivative slot against central differences.

    Parameters
    ----------
    coeffs : CoefficientSet
    rng : numpy.random.Generator
    points : int
        Number of random evaluation points (batched).
    atoms : int
        Atoms of the random state and control clouds.
    h : float
        Difference step on unit-scaled inputs.

    Returns
    -------
    dict
        Slot name to ``max |fd - exact| / max(1, |exact|)`` over points.
    """
    c = coeffs
    x, a, mu, nu = _sample(c, rng, points, atoms)
    out = {}
    for name in RUNNING[:3]:
        fn = getattr(c, name)
        out["dx_" + name] = _rel(_fd(lambda xx: fn(k, xx, a, mu, nu), x, h),
                                 getattr(c, "dx_" + name)(k, x, a, mu, nu))
        out["da_" + name] = _rel(_fd(lambda aa: fn(k, x, aa, mu, nu), a, h),
                                 getattr(c, "da_" + name)(k, x, a, mu, nu))
    out["dx_f"] = _rel(_fd(lambda xx: c.f(k, xx, a, mu, nu), x, h), c.dx_f(k, x, a, mu, nu))
    out["da_f"] = _rel(_fd(lambda aa: c.f(k, x, aa, mu, nu), a, h), c.da_f(k, x, a, mu, nu))
    out["dx_g"] = _rel(_fd(lambda xx: c.g(xx, mu), x, h), c.dx_g(x, mu))

    U = atoms
    zeros_n = {"f": (1, c.n), "b": (1, c.n, c.n), "sigma": (1, c.n, c.d, c.n),
               "sigma0": (1, c.n, c.d, c.n)}
    zeros_l = {"f": (1, c.l), "b": (1, c.n, c.l), "sigma": (1, c.n, c.d, c.l),
               "sigma0": (1, c.n, c.d, c.l)}
    for name in RUNNING:
        fn = getattr(c, name)
        slot = getattr(c, "dmu_" + name)
        worst = 0.0
        for v in range(U):
            fd = _atom_fd(lambda m: fn(k, x, a, m, nu), mu, v, h) * U
            an = slot(k, x, a, mu, nu, mu)[:, :, v] if slot is not None else np.zeros(zeros_n[name])
            worst = max(worst, _rel(fd, an))
        out["dmu_" + name] = worst
        key = "dnu_" + name + "2"
        slot = getattr(c, key)
        worst = 0.0
        for v in range(U):
            fd = _atom_fd(lambda w: fn(k, x, a, mu, w), nu, v, h) * U
            an = slot(k, x, mu, nu, nu)[:, :, v] if slot is not None else np.zeros(zeros_l[name])
            worst = max(worst, _rel(fd, an))
        out[key] = worst
    worst = 0.0
    for v in range(U):
        fd = _atom_fd(lambda m: c.g(x, m), mu, v, h) * U
        an = c.dmu_g(x, mu, mu)[:, :, v] if c.dmu_g is not None else np.zeros((1, c.n))
        worst = max(worst, _rel(fd, an))
    out["dmu_g"] = worst
    return out


def hamiltonian_fd_errors(coeffs, rng, points=100, atoms=4, h=1e-5, k=0):
    """Relative errors of ``da H`` and ``dx H`` against differences of ``H``."""
    c = coeffs
    x, a, mu, nu = _sample(c, rng, points, atoms)
    n, d = c.n, c.d
    y = rng.standard_normal((points, 1, n))
    z = rng.standard_normal((points, 1, n, d))
    z0 = rng.standard_normal((points, 1, n, d))
    th = Theta(x, y, z, z0)
    ga = _fd(lambda aa: hamiltonian(c, k, th, aa, mu, nu), a, h)
    gx = _fd(lambda xx: hamiltonian(c, k, Theta(xx, y, z, z0), a, mu, nu), x, h)
    return {"da_H": _rel(ga, da_H(c, k, th, a, mu, nu)),
            "dx_H": _rel(gx, dx_H(c, k, th, a, mu, nu))}
