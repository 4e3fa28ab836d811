"""Coefficient sets and the linear-quadratic game.

Shape conventions
-----------------
Evaluators are vectorised over arbitrary leading batch axes.  States are
``x: (..., P, n)``, controls ``a: (..., P, l)``.  A measure is passed as its
two marginals, aligned atom clouds ``mu: (..., U, n)`` and ``nu: (..., U, l)``
sharing the batch axes of ``x``; the joint law is the cloud of pairs.  The
time argument ``k`` is a grid node index.

Output shapes::

    b                    (..., P, n)        sigma, sigma0   (..., P, n, d)
    f                    (..., P)           g(x, mu)        (..., P)
    dx_b                 (..., P, n, n)     da_b            (..., P, n, l)
    dx_sigma             (..., P, n, d, n)  da_sigma        (..., P, n, d, l)
    dx_f                 (..., P, n)        da_f            (..., P, l)
    dx_g(x, mu)          (..., P, n)

Measure derivatives take an extra atom array ``u: (..., V, n)`` (state
atoms) or ``w: (..., V, l)`` (control atoms) and return one slice per atom::

    dmu_f(k,x,a,mu,nu,u)      (..., P, V, n)
    dmu_b(k,x,a,mu,nu,u)      (..., P, V, n, n)     [b_i, u_j]
    dmu_sigma(k,x,a,mu,nu,u)  (..., P, V, n, d, n)
    dmu_g(x,mu,u)             (..., P, V, n)
    dnu_b2(k,x,mu,nu,w)       (..., P, V, n, l)
    dnu_sigma2(k,x,mu,nu,w)   (..., P, V, n, d, l)
    dnu_f2(k,x,mu,nu,w)       (..., P, V, l)

A measure-derivative slot left as ``None`` means the derivative vanishes
identically.
"""
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .measures import EmpiricalMeasure

_REQUIRED = ("b", "sigma", "sigma0", "f", "g", "dx_b", "da_b", "dx_sigma", "da_sigma",
             "dx_sigma0", "da_sigma0", "dx_f", "da_f", "dx_g")
MEASURE_SLOTS = ("dmu_f", "dmu_b", "dmu_sigma", "dmu_sigma0", "dmu_g",
                 "dnu_b2", "dnu_sigma2", "dnu_sigma02", "dnu_f2")


@dataclass(frozen=True)
class CoefficientSet:
    """Evaluators of ``b, sigma, sigma0, f, g`` and their derivatives."""

    n: int
    l: int
    d: int
    gamma: float
    b: Callable
    sigma: Callable
    sigma0: Callable
    f: Callable
    g: Callable
    dx_b: Callable
    da_b: Callable
    dx_sigma: Callable
    da_sigma: Callable
    dx_sigma0: Callable
    da_sigma0: Callable
    dx_f: Callable
    da_f: Callable
    dx_g: Callable
    dmu_f: Optional[Callable] = None
    dmu_b: Optional[Callable] = None
    dmu_sigma: Optional[Callable] = None
    dmu_sigma0: Optional[Callable] = None
    dmu_g: Optional[Callable] = None
    dnu_b2: Optional[Callable] = None
    dnu_sigma2: Optional[Callable] = None
    dnu_sigma02: Optional[Callable] = None
    dnu_f2: Optional[Callable] = None
    # closed-form minimiser of a -> H + a.zeta: (k, x, y, z, z0, mu, zeta) -> a
    minimizer: Optional[Callable] = None
    # Hessian of H in a: (k, x, y, z, z0, a, mu) -> (..., P, l, l)
    daa_H: Optional[Callable] = None
    # model-specific flags that let the N-player solver skip zero terms
    # (e.g. "mu_free": no measure dependence of b, sigma, sigma0)
    tags: frozenset = field(default_factory=frozenset)
    name: str = "custom"
    # false when the ``dnu_*`` slots were not supplied (rather than known to vanish)
    measure_slots_complete: bool = True

    def __post_init__(self):
        missing = [s for s in _REQUIRED if getattr(self, s) is None]
        if missing:
            raise ConfigurationError(f"coefficient set lacks evaluators {missing}")
        if self.gamma <= 0:
            raise ConfigurationError("strong-convexity constant gamma must be > 0")

    def with_(self, **changes):
        """Copy with some evaluators replaced."""
        return replace(self, **changes)

    def evaluate(self, name, k, x, a, xi=None, mu=None, nu=None):
        """Evaluate a running-coefficient slot given either a joint ``xi`` or marginals.

        ``xi`` may be an :class:`EmpiricalMeasure` or an atom array
        ``(..., U, n + l)``; it is split into its state and control marginals.
        """
        if xi is not None:
            mu, nu = split_joint(xi, self.n)
        return getattr(self, name)(k, x, a, mu, nu)


def split_joint(xi, n):
    """State and control marginals of a joint cloud."""
    pts = xi.points if isinstance(xi, EmpiricalMeasure) else np.asarray(xi)
    return pts[..., :n], pts[..., n:]


def atoms(m):
    """Atom array of an :class:`EmpiricalMeasure` or pass-through for arrays."""
    return m.points if isinstance(m, EmpiricalMeasure) else np.asarray(m, dtype=float)


# --------------------------------------------------------------------------
# linear-quadratic game

_LQ_SHAPES = {
    "A": ("n", "n"), "B": ("n", "l"), "C": ("n", "d", "n"), "D": ("n", "d", "l"),
    "C0": ("n", "d", "n"), "D0": ("n", "d", "l"), "Q": ("n", "n"), "Qbar": ("n", "n"),
    "S": ("n", "n"), "P": ("l", "l"), "Pbar": ("l", "l"),
    "QT": ("n", "n"), "QbarT": ("n", "n"), "ST": ("n", "n"),
}
_SYMMETRIC = ("Q", "Qbar", "P", "Pbar", "QT", "QbarT")
_TERMINAL = ("QT", "QbarT", "ST")


@dataclass(frozen=True)
class LQCoefficients:
    """Matrices of the linear-quadratic game.

    Running matrices are either constant or tables with a leading axis of
    length ``K + 1`` (one entry per grid node, piecewise constant).  ``C``,
    ``C0`` have shape ``(n, d, n)`` and ``D``, ``D0`` shape ``(n, d, l)``: the
    ``q``-th column of the volatility is ``C[:, q, :] x + D[:, q, :] u``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    C0: np.ndarray
    D0: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    S: np.ndarray
    P: np.ndarray
    Pbar: np.ndarray
    c1: float
    c2: float
    QT: np.ndarray
    QbarT: np.ndarray
    ST: np.ndarray
    n: int
    l: int
    d: int

    @classmethod
    def build(cls, A, B, Q, P, c1=1.0, c2=0.0, C=None, D=None, C0=None, D0=None,
              Qbar=None, S=None, Pbar=None, QT=None, QbarT=None, ST=None, d=1):
        """Normalise user input (scalars, 2-D volatility blocks) into tensors.

        Omitted running matrices default to zero; omitted terminal matrices
        default to the running ones at the last node.
        """
        A0 = np.asarray(A, dtype=float)
        # 1-D input can only be a per-node table of scalars
        n = 1 if A0.ndim <= 1 else A0.shape[-1]
        B0 = np.asarray(B, dtype=float)
        l = 1 if B0.ndim <= 1 else B0.shape[-1]
        d = int(d)
        raw = dict(A=A, B=B, C=C, D=D, C0=C0, D0=D0, Q=Q, Qbar=Qbar, S=S, P=P, Pbar=Pbar)
        dims = {"n": n, "l": l, "d": d}
        out = {}
        for key, val in raw.items():
            out[key] = _normalise(key, val, dims)
        for key, src in zip(_TERMINAL, ("Q", "Qbar", "S")):
            val = {"QT": QT, "QbarT": QbarT, "ST": ST}[key]
            if val is None:
                m = out[src]
                out[key] = m[-1] if m.ndim == len(_LQ_SHAPES[src]) + 1 else m
            else:
                out[key] = _normalise(key, val, dims, allow_table=False)
        return cls(c1=float(c1), c2=float(c2), n=n, l=l, d=d, **out)

    def at(self, name, k):
        """Matrix ``name`` at grid node ``k``."""
        m = getattr(self, name)
        return m[k] if m.ndim == len(_LQ_SHAPES[name]) + 1 else m

    def table_length(self):
        lens = {getattr(self, k).shape[0] for k in _LQ_SHAPES
                if getattr(self, k).ndim == len(_LQ_SHAPES[k]) + 1}
        if len(lens) > 1:
            raise ConfigurationError(f"per-node tables have inconsistent lengths {sorted(lens)}")
        return lens.pop() if lens else None

    def scaled_costs(self, s):
        """Copy with every cost matrix multiplied by ``s``."""
        return replace(self, **{k: getattr(self, k) * s
                                for k in ("Q", "Qbar", "P", "Pbar", "QT", "QbarT")})


def _normalise(key, val, dims, allow_table=True):
    shape = tuple(dims[s] for s in _LQ_SHAPES[key])
    if val is None:
        return np.zeros(shape)
    arr = np.asarray(val, dtype=float)
    vol = key in ("C", "D", "C0", "D0")

    def fit(a):
        if a.shape == shape:
            return a
        if a.ndim == 0:
            if all(s == 1 for s in shape):
                return np.full(shape, float(a))
            if len(shape) == 2 and shape[0] == shape[1]:
                return float(a) * np.eye(shape[0])
            return None
        if vol and a.shape == (shape[0] * shape[1], shape[2]):
            return a.reshape(shape)
        return None

    out = fit(arr)
    if out is not None:
        return out
    if allow_table and arr.ndim >= 1:
        rows = [fit(arr[i]) for i in range(arr.shape[0])]
        if all(r is not None for r in rows):
            return np.stack(rows)
    raise ConfigurationError(f"{key}: shape {arr.shape} incompatible with {shape}")


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate_lq`; ``passed`` iff no violations."""

    passed: bool
    lam: float
    violations: list

    @property
    def lambda_(self):
        return self.lam


def _min_eig(m):
    return float(np.linalg.eigvalsh(0.5 * (m + m.T)).min())


def validate_lq(lq, grid, tol=1e-12):
    """Check positivity, sign and ratio conditions at every grid node.

    Returns a :class:`ValidationReport`; failures are reported, never raised.
    ``lam`` is the largest ``lambda`` with ``Q + Qbar >= lambda I`` at every
    running node and ``QT + QbarT >= lambda I`` at the terminal node.
    """
    violations = []
    tl = lq.table_length()
    if tl is not None and tl != grid.K + 1:
        violations.append(("table length matches grid", -1))
    lam = np.inf
    for k in range(grid.K + 1):
        mats = {name: lq.at(name, min(k, (tl or 1) - 1) if tl else k)
                for name in ("A", "B", "C", "D", "C0", "D0", "Q", "Qbar", "S", "P", "Pbar")}
        if not all(np.all(np.isfinite(m)) for m in mats.values()):
            violations.append(("bounded", k))
            continue
        for name in ("Q", "Qbar", "P", "Pbar"):
            if not np.allclose(mats[name], mats[name].T, atol=1e-12):
                violations.append((f"{name} symmetric", k))
        if _min_eig(mats["P"]) <= tol:
            violations.append(("P>0", k))
        if _min_eig(mats["Q"]) <= tol:
            violations.append(("Q>0", k))
        QS = mats["Qbar"] @ mats["S"]
        if np.linalg.eigvalsh(0.5 * (QS + QS.T)).max() > tol:
            violations.append(("Qbar S<=0", k))
        lam = min(lam, _min_eig(mats["Q"] + mats["Qbar"]))
    term = {name: getattr(lq, name) for name in _TERMINAL}
    if not all(np.all(np.isfinite(m)) for m in term.values()):
        violations.append(("bounded", grid.K))
    else:
        for name in ("QT", "QbarT"):
            if not np.allclose(term[name], term[name].T, atol=1e-12):
                violations.append((f"{name} symmetric", grid.K))
        if _min_eig(term["QT"]) <= tol:
            violations.append(("QT>0", grid.K))
        QS = term["QbarT"] @ term["ST"]
        if np.linalg.eigvalsh(0.5 * (QS + QS.T)).max() > tol:
            violations.append(("QbarT ST<=0", grid.K))
        lam = min(lam, _min_eig(term["QT"] + term["QbarT"]))
    if not lam > tol:
        violations.append(("Q+Qbar>=lambda>0", -1))
    if not (lq.c1 == 0 or lq.c2 / lq.c1 <= 1):
        violations.append(("c2/c1<=1", -1))
    return ValidationReport(not violations, float(lam), violations)


def lq_coefficients(lq, grid=None, require_valid=True):
    """Closed-form :class:`CoefficientSet` of the LQ game.

    Parameters
    ----------
    lq : LQCoefficients
    grid : TimeGrid, optional
        Needed to validate per-node tables; constant models may omit it.
    require_valid : bool
        When true, any violation reported by :func:`validate_lq` raises
        :class:`ConfigurationError`.  Set to false to study models that break
        the assumptions (the monotonicity falsifier needs this); ``P`` must be
        positive definite regardless.
    """
    from .noise import make_time_grid
    g_ = grid if grid is not None else make_time_grid(1.0, max(1, (lq.table_length() or 1) - 1))
    report = validate_lq(lq, g_)
    if require_valid and not report.passed:
        raise ConfigurationError("LQ model fails validation",
                                 [f"{name} (node {k})" for name, k in report.violations])
    tl = lq.table_length()
    nodes = range(tl) if tl else [0]
    gamma = min(_min_eig(lq.at("P", k)) for k in nodes)
    if not gamma > 0:
        raise ConfigurationError("P must be positive definite for the control to be defined")

    n, l, d, c1, c2 = lq.n, lq.l, lq.d, lq.c1, lq.c2
    # the per-node cache avoids recomputing inverses inside time loops
    at = lq.at
    pinv = {}

    def Pinv(k):
        key = k if tl else 0
        if key not in pinv:
            pinv[key] = np.linalg.inv(at("P", k))
        return pinv[key]

    def _bar(m):
        return m.mean(axis=-2, keepdims=True)

    def _u(k, a, nu):
        return c1 * a - c2 * _bar(nu)

    def b(k, x, a, mu, nu):
        return x @ at("A", k).T + _u(k, a, nu) @ at("B", k).T

    def _vol(Cm, Dm, x, u):
        return np.einsum("iqj,...j->...iq", Cm, x) + np.einsum("iqm,...m->...iq", Dm, u)

    def sigma(k, x, a, mu, nu):
        return _vol(at("C", k), at("D", k), x, _u(k, a, nu))

    def sigma0(k, x, a, mu, nu):
        return _vol(at("C0", k), at("D0", k), x, _u(k, a, nu))

    def _dev(x, mu, S):
        return x - _bar(mu) @ S.T

    def _quad(v, M):
        return np.einsum("...i,ij,...j->...", v, M, v)

    def f(k, x, a, mu, nu):
        e = _dev(x, mu, at("S", k))
        nb = _bar(nu)
        return 0.5 * (_quad(x, at("Q", k)) + _quad(a, at("P", k)) + _quad(e, at("Qbar", k))
                      + _quad(nb, at("Pbar", k)))

    def g(x, mu):
        e = _dev(x, mu, lq.ST)
        return 0.5 * (_quad(x, lq.QT) + _quad(e, lq.QbarT))

    def _bc(m, lead, tail=()):
        return np.broadcast_to(m, lead + m.shape if not tail else lead + tail)

    def dx_b(k, x, a, mu, nu):
        return _bc(at("A", k), x.shape[:-1])

    def da_b(k, x, a, mu, nu):
        return _bc(c1 * at("B", k), x.shape[:-1])

    def dx_sigma(k, x, a, mu, nu):
        return _bc(at("C", k), x.shape[:-1])

    def da_sigma(k, x, a, mu, nu):
        return _bc(c1 * at("D", k), x.shape[:-1])

    def dx_sigma0(k, x, a, mu, nu):
        return _bc(at("C0", k), x.shape[:-1])

    def da_sigma0(k, x, a, mu, nu):
        return _bc(c1 * at("D0", k), x.shape[:-1])

    def dx_f(k, x, a, mu, nu):
        return x @ at("Q", k) + _dev(x, mu, at("S", k)) @ at("Qbar", k)

    def da_f(k, x, a, mu, nu):
        return a @ at("P", k)

    def dx_g(x, mu):
        return x @ lq.QT + _dev(x, mu, lq.ST) @ lq.QbarT

    def _per_atom(v, V):
        # (..., P, m) -> (..., P, V, m) without copying
        return np.broadcast_to(v[..., None, :], v.shape[:-1] + (V, v.shape[-1]))

    def dmu_f(k, x, a, mu, nu, u):
        S, Qb = at("S", k), at("Qbar", k)
        return _per_atom(-(_dev(x, mu, S) @ Qb) @ S, u.shape[-2])

    def dmu_g(x, mu, u):
        return _per_atom(-(_dev(x, mu, lq.ST) @ lq.QbarT) @ lq.ST, u.shape[-2])

    def _lead(x, w):
        return x.shape[:-1] + (w.shape[-2],)

    def dnu_b2(k, x, mu, nu, w):
        return _bc(-c2 * at("B", k), _lead(x, w))

    def dnu_sigma2(k, x, mu, nu, w):
        return _bc(-c2 * at("D", k), _lead(x, w))

    def dnu_sigma02(k, x, mu, nu, w):
        return _bc(-c2 * at("D0", k), _lead(x, w))

    def dnu_f2(k, x, mu, nu, w):
        v = _bar(nu) @ at("Pbar", k)
        return np.broadcast_to(v[..., None, :], _lead(x, w) + (l,))

    def minimizer(k, x, y, z, z0, mu, zeta):
        comb = (y @ at("B", k) + np.einsum("iqm,...iq->...m", at("D", k), z)
                + np.einsum("iqm,...iq->...m", at("D0", k), z0))
        rhs = c1 * comb
        if zeta is not None:
            rhs = rhs + zeta
        return -(rhs @ Pinv(k).T)

    def daa_H(k, x, y, z, z0, a, mu):
        return _bc(at("P", k), a.shape[:-1])

    tags = {"lq"}
    zero_noise = not any(np.any(getattr(lq, m)) for m in ("C", "D", "C0", "D0"))
    if zero_noise:
        tags.add("deterministic")
    if not np.any(lq.D0) and not np.any(lq.C0):
        tags.add("no_common_vol")
    return CoefficientSet(
        n=n, l=l, d=d, gamma=gamma, b=b, sigma=sigma, sigma0=sigma0, f=f, g=g,
        dx_b=dx_b, da_b=da_b, dx_sigma=dx_sigma, da_sigma=da_sigma,
        dx_sigma0=dx_sigma0, da_sigma0=da_sigma0, dx_f=dx_f, da_f=da_f, dx_g=dx_g,
        dmu_f=dmu_f if np.any(lq.Qbar) and np.any(lq.S) else None,
        dmu_g=dmu_g if np.any(lq.QbarT) and np.any(lq.ST) else None,
        dnu_b2=dnu_b2 if c2 != 0 and np.any(lq.B) else None,
        dnu_sigma2=dnu_sigma2 if c2 != 0 and np.any(lq.D) else None,
        dnu_sigma02=dnu_sigma02 if c2 != 0 and np.any(lq.D0) else None,
        dnu_f2=dnu_f2 if np.any(lq.Pbar) else None,
        minimizer=minimizer, daa_H=daa_H, tags=frozenset(tags), name="lq")


def lq_lipschitz_bound(lq):
    """Constant ``L`` with ``|b - b'| <= L (|dx| + |da| + W2)`` for the LQ drift."""
    tl = lq.table_length()
    nodes = range(tl) if tl else [0]
    L = 0.0
    for k in nodes:
        A, B = lq.at("A", k), lq.at("B", k)
        L = max(L, np.linalg.norm(A, 2), abs(lq.c1) * np.linalg.norm(B, 2),
                abs(lq.c2) * np.linalg.norm(B, 2))
    return float(L)


def eval_cost(coeffs, x_path, a_path, grid, xi_flow=None):
    """Left-endpoint Riemann sum of ``f`` plus terminal ``g``, averaged over particles.

    Parameters
    ----------
    coeffs : CoefficientSet
    x_path : ndarray, shape (K+1, ..., P, n)
    a_path : ndarray, shape (K, ..., P, l) or (K+1, ..., P, l)
        Entries past step ``K - 1`` are ignored.
    grid : TimeGrid
    xi_flow : tuple of arrays, optional
        ``(mu_path, nu_path)`` atom clouds per step; defaults to the clouds
        of ``x_path`` and ``a_path`` themselves (the equilibrium case).
    """
    x_path = np.asarray(x_path, dtype=float)
    a_path = np.asarray(a_path, dtype=float)
    if x_path.shape[0] != grid.K + 1 or a_path.shape[0] not in (grid.K, grid.K + 1):
        raise ConfigurationError(
            f"paths of length {x_path.shape[0]}/{a_path.shape[0]} do not match K={grid.K}")
    mu_path, nu_path = xi_flow if xi_flow is not None else (x_path, a_path)
    total = np.zeros(x_path.shape[1:-1])
    for k in range(grid.K):
        total += coeffs.f(k, x_path[k], a_path[k], mu_path[k], nu_path[k]) * grid.dt
    total += coeffs.g(x_path[grid.K], mu_path[grid.K])
    return float(total.mean())
