"""Hamiltonian, its minimiser and the reduced forward-backward coefficients."""
from dataclasses import dataclass

import numpy as np

from .errors import SolverError
from .measures import EmpiricalMeasure
from .model import atoms


@dataclass(frozen=True)
class Theta:
    """Batch of ``(x, y, z, z0)`` with shapes ``(..., n)``, ``(..., n)``, ``(..., n, d)``, ``(..., n, d)``."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    z0: np.ndarray

    @property
    def n(self):
        return self.x.shape[-1]

    @property
    def d(self):
        return self.z.shape[-1]

    def flat(self):
        lead = self.x.shape[:-1]
        return np.concatenate([self.x, self.y, self.z.reshape(lead + (-1,)),
                               self.z0.reshape(lead + (-1,))], axis=-1)

    @classmethod
    def from_flat(cls, pts, n, d):
        pts = np.asarray(pts, dtype=float)
        lead = pts.shape[:-1]
        if pts.shape[-1] != 2 * n + 2 * n * d:
            raise ValueError(f"flat theta of width {pts.shape[-1]} does not match n={n}, d={d}")
        x = pts[..., :n]
        y = pts[..., n:2 * n]
        z = pts[..., 2 * n:2 * n + n * d].reshape(lead + (n, d))
        z0 = pts[..., 2 * n + n * d:].reshape(lead + (n, d))
        return cls(x, y, z, z0)

    @classmethod
    def zeros(cls, lead, n, d):
        return cls(np.zeros(lead + (n,)), np.zeros(lead + (n,)),
                   np.zeros(lead + (n, d)), np.zeros(lead + (n, d)))

    def map(self, fn):
        return Theta(fn(self.x), fn(self.y), fn(self.z), fn(self.z0))


@dataclass(frozen=True)
class ReducedEval:
    """``(B, Sigma, Sigma0, F)`` at a batch of points plus the control used."""

    B: np.ndarray
    Sigma: np.ndarray
    Sigma0: np.ndarray
    F: np.ndarray
    alpha: np.ndarray


def _measure_pair(xi, n):
    """``(mu, nu)`` atom arrays from a joint measure, a pair, or a state cloud."""
    if isinstance(xi, tuple):
        return atoms(xi[0]), atoms(xi[1])
    pts = atoms(xi)
    return pts[..., :n], pts[..., n:]


def _lift(theta, *arrays):
    """Add a particle axis to single-point input so evaluators see (..., P, .)."""
    if theta.x.ndim == 1:
        return True, theta.map(lambda v: v[None]), [None if a is None else np.asarray(a)[None]
                                                   for a in arrays]
    return False, theta, list(arrays)


def hamiltonian(coeffs, k, theta, a, mu, nu):
    """``f + b.y + sigma:z + sigma0:z0`` on batched arrays."""
    x = theta.x
    return (coeffs.f(k, x, a, mu, nu)
            + np.einsum("...i,...i->...", coeffs.b(k, x, a, mu, nu), theta.y)
            + np.einsum("...iq,...iq->...", coeffs.sigma(k, x, a, mu, nu), theta.z)
            + np.einsum("...iq,...iq->...", coeffs.sigma0(k, x, a, mu, nu), theta.z0))


def dx_H(coeffs, k, theta, a, mu, nu):
    """Gradient of the Hamiltonian in ``x``, shape ``(..., P, n)``."""
    x = theta.x
    return (coeffs.dx_f(k, x, a, mu, nu)
            + np.einsum("...ij,...i->...j", coeffs.dx_b(k, x, a, mu, nu), theta.y)
            + np.einsum("...iqj,...iq->...j", coeffs.dx_sigma(k, x, a, mu, nu), theta.z)
            + np.einsum("...iqj,...iq->...j", coeffs.dx_sigma0(k, x, a, mu, nu), theta.z0))


def da_H(coeffs, k, theta, a, mu, nu):
    """Gradient of the Hamiltonian in ``a``, shape ``(..., P, l)``."""
    x = theta.x
    return (coeffs.da_f(k, x, a, mu, nu)
            + np.einsum("...ij,...i->...j", coeffs.da_b(k, x, a, mu, nu), theta.y)
            + np.einsum("...iqj,...iq->...j", coeffs.da_sigma(k, x, a, mu, nu), theta.z)
            + np.einsum("...iqj,...iq->...j", coeffs.da_sigma0(k, x, a, mu, nu), theta.z0))


def dmu_H(coeffs, k, theta, a, mu, nu, u):
    """L-derivative of the Hamiltonian in the state law at atoms ``u``, ``(..., P, V, n)``."""
    x = theta.x
    V = u.shape[-2]
    out = np.zeros(x.shape[:-1] + (V, coeffs.n))
    if coeffs.dmu_f is not None:
        out = out + coeffs.dmu_f(k, x, a, mu, nu, u)
    if coeffs.dmu_b is not None:
        out = out + np.einsum("...vij,...i->...vj", coeffs.dmu_b(k, x, a, mu, nu, u), theta.y)
    if coeffs.dmu_sigma is not None:
        out = out + np.einsum("...viqj,...iq->...vj", coeffs.dmu_sigma(k, x, a, mu, nu, u), theta.z)
    if coeffs.dmu_sigma0 is not None:
        out = out + np.einsum("...viqj,...iq->...vj", coeffs.dmu_sigma0(k, x, a, mu, nu, u),
                              theta.z0)
    return out


def eval_H(coeffs, t, theta, a, xi):
    """Hamiltonian at ``(theta, a)`` under the joint law ``xi``.

    ``xi`` is an :class:`EmpiricalMeasure` over ``(x, a)``, a ``(mu, nu)`` pair
    or a joint atom array.  Single points (``theta.x`` of shape ``(n,)``)
    return a scalar.
    """
    mu, nu = _measure_pair(xi, coeffs.n)
    single, th, (a_,) = _lift(theta, a)
    out = hamiltonian(coeffs, t, th, a_, mu, nu)
    return float(out[0]) if single else out


def _zero_nu(coeffs, mu):
    return np.zeros(mu.shape[:-1] + (coeffs.l,))


def _newton(coeffs, k, theta, mu, zeta, tol, max_iter):
    nu = _zero_nu(coeffs, mu)
    lead = theta.x.shape[:-1]
    a = np.zeros(lead + (coeffs.l,))
    zt = np.zeros_like(a) if zeta is None else np.broadcast_to(zeta, a.shape)

    def obj(b):
        return hamiltonian(coeffs, k, theta, b, mu, nu) + np.einsum("...i,...i->...", b, zt)

    def grad(b):
        return da_H(coeffs, k, theta, b, mu, nu) + zt

    res = np.inf
    for _ in range(max_iter + 1):
        gr = grad(a)
        res = np.linalg.norm(gr, axis=-1)
        if not np.all(np.isfinite(res)):
            raise SolverError("non-finite gradient in control minimisation")
        if res.max(initial=0.0) <= tol:
            return a
        if coeffs.daa_H is not None:
            hess = coeffs.daa_H(k, theta.x, theta.y, theta.z, theta.z0, a, mu)
        else:
            hess = np.empty(lead + (coeffs.l, coeffs.l))
            for j in range(coeffs.l):
                h = 1e-5 * np.maximum(1.0, np.abs(a[..., j]))[..., None]
                e = np.zeros_like(a)
                e[..., j] = 1.0
                hess[..., :, j] = (grad(a + h * e) - grad(a - h * e)) / (2 * h)
            hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        step = -np.linalg.solve(hess, gr[..., None])[..., 0]
        step[res <= tol] = 0.0
        f0 = obj(a)
        slope = np.einsum("...i,...i->...", gr, step)
        t = np.ones(lead)
        for _ in range(40):
            trial = a + t[..., None] * step
            bad = obj(trial) > f0 + 1e-4 * t * slope + 1e-14 * np.abs(f0)
            if not np.any(bad):
                break
            t = np.where(bad, 0.5 * t, t)
        a = a + t[..., None] * step
    raise SolverError(f"Newton did not reach FOC tolerance {tol:g}: max residual {res.max():.3e}")


def minimize_H(coeffs, t, theta, mu, zeta=None, tol=1e-10, max_iter=50, method="auto"):
    """Unique minimiser of ``a -> H(t, theta, a, xi) + a.zeta``.

    Uses the model's closed form when available (``method="auto"``) and
    otherwise a damped Newton iteration started at 0 with Armijo
    backtracking.  ``mu`` is the state marginal (EmpiricalMeasure or atoms).
    """
    mu = atoms(mu)
    single, th, (z_,) = _lift(theta, zeta)
    if coeffs.minimizer is not None and method != "newton":
        a = coeffs.minimizer(t, th.x, th.y, th.z, th.z0, mu, z_)
    else:
        a = _newton(coeffs, t, th, mu, z_, tol, max_iter)
    return a[0] if single else a


def foc_residual(coeffs, t, theta, mu, zeta, a):
    """``|da H + zeta|`` per point (a float for single points)."""
    mu = atoms(mu)
    single, th, (a_, z_) = _lift(theta, a, zeta)
    gr = da_H(coeffs, t, th, a_, mu, _zero_nu(coeffs, mu))
    if z_ is not None:
        gr = gr + z_
    r = np.linalg.norm(gr, axis=-1)
    return float(r[0]) if single else r


def reduced_coefficients(coeffs, t, theta, xi=None, zeta=None):
    """``B, Sigma, Sigma0, F`` at ``theta`` under the law ``xi`` of theta-atoms.

    The control is ``Lambda(theta, mu, zeta)`` with ``mu`` the state marginal
    of ``xi``; the control marginal of the pushed-forward law uses
    ``Lambda(atom, mu, 0)``.  ``xi`` defaults to the cloud of ``theta``
    itself (last-but-one axis is the atom axis); it may also be a
    :class:`Theta` of atoms or an :class:`EmpiricalMeasure` of flat tuples.
    """
    if isinstance(xi, EmpiricalMeasure):
        xi = Theta.from_flat(xi.points, coeffs.n, coeffs.d)
    single, th, (z_,) = _lift(theta, zeta)
    same = xi is None
    cloud = th if same else xi
    mu = cloud.x
    a = minimize_H(coeffs, t, th, mu, z_)
    if same and z_ is None:
        nu = a
    else:
        nu = minimize_H(coeffs, t, cloud, mu, None)
    x = th.x
    out = ReducedEval(coeffs.b(t, x, a, mu, nu), coeffs.sigma(t, x, a, mu, nu),
                      coeffs.sigma0(t, x, a, mu, nu), dx_H(coeffs, t, th, a, mu, nu), a)
    if single:
        out = ReducedEval(*(v[0] for v in (out.B, out.Sigma, out.Sigma0, out.F, out.alpha)))
    return out


def terminal_G(coeffs, x, mu):
    """``G(x, mu) = dx g(x, mu)``."""
    mu = atoms(mu)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return coeffs.dx_g(x[None], mu)[0]
    return coeffs.dx_g(x, mu)


def make_lambda_eval(coeffs):
    """Callable ``(t, flat_theta_points, mu_points) -> controls`` for pushforwards."""

    def lam(t, pts, mu):
        th = Theta.from_flat(pts, coeffs.n, coeffs.d)
        return minimize_H(coeffs, t, th, mu, None)

    lam.n = coeffs.n
    return lam
