"""Uniformly weighted empirical measures."""
from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedError


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Cloud of ``M`` atoms in ``R^k``, each with weight ``1/M``."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("an empirical measure needs at least one atom")
        if not np.all(np.isfinite(p)):
            raise ValueError("atoms must be finite")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def weight(self):
        return 1.0 / self.size

    def mean(self):
        return self.points.mean(axis=0)

    def __eq__(self, other):
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return self.points.shape == other.points.shape and np.array_equal(
            _canonical(self.points), _canonical(other.points))

    __hash__ = None


def _canonical(points):
    order = np.lexsort(points.T[::-1])
    return points[order]


def second_moment(mu):
    """``(1/M) sum |x_i|^2``."""
    return float(np.mean(np.sum(mu.points ** 2, axis=1)))


def wasserstein2_1d(mu, nu):
    """Exact W2 between two 1-D clouds with equal atom counts (monotone coupling)."""
    if mu.dim != 1 or nu.dim != 1:
        raise UnsupportedError("exact W2 is only available in one dimension")
    if mu.size != nu.size:
        raise UnsupportedError("W2 by sorting needs equal atom counts")
    a = np.sort(mu.points[:, 0])
    b = np.sort(nu.points[:, 0])
    return float(np.sqrt(np.mean((a - b) ** 2)))


def identity_coupling_gap(mu, nu):
    """Mean-square gap under the index coupling; an upper bound for W2^2."""
    if mu.points.shape != nu.points.shape:
        raise UnsupportedError("identity coupling needs matching clouds")
    return float(np.mean(np.sum((mu.points - nu.points) ** 2, axis=1)))


def marginal(xi, coords):
    """Project every atom onto ``coords``."""
    idx = np.atleast_1d(np.asarray(coords))
    if idx.size == 0:
        raise IndexError("empty coordinate set")
    if np.any(idx >= xi.dim) or np.any(idx < -xi.dim):
        raise IndexError(f"coordinates {idx.tolist()} out of range for dim {xi.dim}")
    return EmpiricalMeasure(xi.points[:, idx])


def pushforward_phi(xi, lambda_eval, t):
    """Map each theta-atom to ``(x, Lambda_t(theta, mu, 0))``.

    Parameters
    ----------
    xi : EmpiricalMeasure
        Atoms are flattened ``(x, y, z, z0)`` tuples.
    lambda_eval : callable
        ``lambda_eval(t, theta_points, mu_points) -> (M, l)`` controls, where
        ``mu_points`` is the state marginal; see
        :func:`mfglab.hamiltonian.make_lambda_eval`.
    t : int
        Grid node index.
    """
    n = lambda_eval.n
    x = xi.points[:, :n]
    a = np.asarray(lambda_eval(t, xi.points, x))
    return EmpiricalMeasure(np.concatenate([x, a.reshape(xi.size, -1)], axis=1))


def conditional_law(theta_paths, world, t):
    """Empirical law of the flattened ``Theta`` over one world's particles."""
    pts = theta_paths.flat(world, t)
    if pts.shape[0] == 0:
        raise ValueError("world has no particles")
    return EmpiricalMeasure(pts)
