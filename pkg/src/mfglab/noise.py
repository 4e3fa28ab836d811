"""Time grid, initial laws and reproducible Brownian increments.

Every Gaussian stream is keyed by ``(seed, role, world, step)`` through
``numpy.random.SeedSequence`` spawn keys and drawn with the counter-based
Philox generator.  Idiosyncratic increments of one (world, step) pair come
from a single stream laid out path-major, so the first ``N`` paths are the
same no matter how many paths are requested.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

ROLE_COMMON = 0
ROLE_IDIO = 1
ROLE_INIT = 2
ROLE_AUX = 3


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, T]`` with ``K`` steps; ``dt`` is derived."""

    T: float
    K: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ConfigurationError(f"grid.T must be > 0, got {self.T}")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigurationError(f"grid.K must be >= 1, got {self.K}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "K", int(self.K))

    @property
    def dt(self):
        return self.T / self.K

    @property
    def times(self):
        return np.arange(self.K + 1) * self.T / self.K

    def t(self, k):
        return k * self.T / self.K


def make_time_grid(T, K):
    """Build a :class:`TimeGrid`, rejecting ``T <= 0`` and ``K < 1``."""
    return TimeGrid(T, K)


@dataclass(frozen=True)
class InitialLaw:
    """Point mass at ``mean`` (``cov is None``) or Gaussian(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1 or not np.all(np.isfinite(mean)):
            raise ConfigurationError("initial law mean must be a finite vector")
        object.__setattr__(self, "mean", mean)
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if cov.ndim == 0:
                cov = cov * np.eye(mean.size)
            if cov.shape != (mean.size, mean.size):
                raise ConfigurationError("initial law cov must be n x n")
            if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ConfigurationError("initial law cov must be symmetric PSD")
            object.__setattr__(self, "cov", cov)

    @property
    def n(self):
        return self.mean.size

    @property
    def is_point_mass(self):
        return self.cov is None or not np.any(self.cov)

    @classmethod
    def point(cls, x0):
        return cls(np.atleast_1d(np.asarray(x0, dtype=float)))

    @classmethod
    def gaussian(cls, mean, cov):
        return cls(mean, cov)

    def _factor(self):
        w, v = np.linalg.eigh(self.cov)
        return v * np.sqrt(np.clip(w, 0.0, None))

    def sample(self, rng, size):
        """Draw ``size`` states, consuming ``size * n`` normals row-major."""
        if self.is_point_mass:
            return np.broadcast_to(self.mean, (size, self.n)).copy()
        g = rng.standard_normal((size, self.n))
        return self.mean + g @ self._factor().T


def stream(seed, role, *key):
    """Philox generator for one keyed stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(role),) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NoiseBundle:
    """Common and idiosyncratic increments plus initial states.

    ``common`` has shape ``(W, K, d)``; idiosyncratic increments are stored
    step-major as ``(K, W, P, d)`` for cache-friendly sweeps and exposed in
    path-major order by :attr:`idiosyncratic`.  ``initial_states`` is
    ``(W, P, n)``.  All arrays are read-only.
    """

    grid: TimeGrid
    d: int
    seed: int
    mu0: InitialLaw
    common: np.ndarray
    idio: np.ndarray
    initial_states: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def worlds(self):
        return self.common.shape[0]

    @property
    def paths(self):
        return self.idio.shape[2]

    @property
    def n(self):
        return self.initial_states.shape[-1]

    @property
    def idiosyncratic(self):
        """View with shape ``(W, P, K, d)``."""
        return self.idio.transpose(1, 2, 0, 3)

    def idio_step(self, k):
        """Increments of every path at step ``k``, shape ``(W, P, d)``."""
        return self.idio[k]

    def common_step(self, k):
        """Common increment at step ``k``, shape ``(W, d)``."""
        return self.common[:, k]


def sample_noise(grid, paths, d, mu0, seed, worlds=1):
    """Generate a :class:`NoiseBundle` for ``worlds`` common paths.

    Parameters
    ----------
    grid : TimeGrid
    paths : int
        Number of idiosyncratic paths (players or particles) per world.
    d : int
        Brownian dimension, shared by idiosyncratic and common noise.
    mu0 : InitialLaw
    seed : int
    worlds : int
        Number of independent common-noise paths.
    """
    if paths < 1 or d < 1 or worlds < 1:
        raise ConfigurationError("paths, d and worlds must all be >= 1")
    if not isinstance(mu0, InitialLaw):
        raise ConfigurationError("mu0 must be an InitialLaw")
    K, sq = grid.K, np.sqrt(grid.dt)
    common = np.empty((worlds, K, d))
    idio = np.empty((K, worlds, paths, d))
    init = np.empty((worlds, paths, mu0.n))
    for w in range(worlds):
        common[w] = stream(seed, ROLE_COMMON, w).standard_normal((K, d)) * sq
        init[w] = mu0.sample(stream(seed, ROLE_INIT, w), paths)
        for k in range(K):
            idio[k, w] = stream(seed, ROLE_IDIO, w, k).standard_normal((paths, d)) * sq
    return NoiseBundle(grid, int(d), int(seed), mu0, _readonly(common),
                       _readonly(idio), _readonly(init))


def restrict_players(bundle, N):
    """Keep the first ``N`` paths of every world; the common path is shared."""
    if N < 1 or N > bundle.paths:
        raise IndexError(f"cannot restrict {bundle.paths} paths to {N}")
    if N == bundle.paths:
        return bundle
    idio = _readonly(np.ascontiguousarray(bundle.idio[:, :, :N]))
    init = _readonly(np.ascontiguousarray(bundle.initial_states[:, :N]))
    return NoiseBundle(bundle.grid, bundle.d, bundle.seed, bundle.mu0,
                       bundle.common, idio, init, dict(bundle.meta))


def restrict_worlds(bundle, W):
    """Keep the first ``W`` common paths (and their idiosyncratic noise)."""
    if W < 1 or W > bundle.worlds:
        raise IndexError(f"cannot restrict {bundle.worlds} worlds to {W}")
    if W == bundle.worlds:
        return bundle
    return NoiseBundle(bundle.grid, bundle.d, bundle.seed, bundle.mu0,
                       _readonly(bundle.common[:W].copy()),
                       _readonly(np.ascontiguousarray(bundle.idio[:, :W])),
                       _readonly(bundle.initial_states[:W].copy()), dict(bundle.meta))


def permute_players(bundle, perm):
    """Relabel paths: new path ``i`` is old path ``perm[i]`` in every world."""
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(bundle.paths)):
        raise ConfigurationError("perm must be a permutation of the path indices")
    return NoiseBundle(bundle.grid, bundle.d, bundle.seed, bundle.mu0, bundle.common,
                       _readonly(np.ascontiguousarray(bundle.idio[:, :, perm])),
                       _readonly(bundle.initial_states[:, perm].copy()), dict(bundle.meta))
