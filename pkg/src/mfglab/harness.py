"""Coupling of the mean-field solution to the N-player game, gap metrics and oracles.

The conditionally i.i.d. copies are the first ``N`` particles of one large
particle solve per common path: they are driven by exactly the same
idiosyncratic increments and initial states as players ``1..N`` of the
N-player game on the same bundle.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError, UnsupportedError
from .hamiltonian import Theta, dmu_H, minimize_H, reduced_coefficients, terminal_G
from .mkv import picard_solve, solve

DIAGNOSTICS = ("EB", "ESigma", "ESigma0", "EF", "EG")


# --------------------------------------------------------------------------
# coupled copies

@dataclass
class CoupledCopies:
    """Copies of the mean-field solution attached to players ``1..max(N)``.

    ``X (K+1, W, Nmax, n)`` and ``alpha (K, W, Nmax, l)``; ``diagnostics[N]``
    holds the mean squared error terms of the N-player perturbation.
    """

    solution: object
    X: np.ndarray
    alpha: np.ndarray
    diagnostics: dict
    grid: object
    seed: int

    def players(self, N):
        return self.X[:, :, :N], self.alpha[:, :, :N]


def _cloud(th, N):
    return Theta(th.x[:, :N], th.y[:, :N], th.z[:, :N], th.z0[:, :N])


def _self_atom(D):
    """Diagonal ``D[..., i, i, :]`` of a per-atom derivative ``(..., P, V=P, m)``."""
    P = D.shape[-3]
    ii = np.arange(P)
    return D[..., ii, ii, :]


class _ErrorTerms:
    """``on_step`` hook accumulating the error terms along the copies for each ``N``."""

    def __init__(self, coeffs, n_list, grid):
        self.coeffs, self.n_list, self.grid = coeffs, list(n_list), grid
        self.acc = {N: dict.fromkeys(DIAGNOSTICS, 0.0) for N in self.n_list}

    def __call__(self, k, info):
        c, dt = self.coeffs, self.grid.dt
        if "theta" not in info:
            x = info["x"]
            G1 = terminal_G(c, x, x)
            for N in self.n_list:
                xN = x[:, :N]
                EG = terminal_G(c, xN, xN) - G1[:, :N]
                if c.dmu_g is not None:
                    EG = EG + _self_atom(c.dmu_g(xN, xN, xN)) / N
                self.acc[N]["EG"] = float(np.mean(np.sum(EG ** 2, axis=-1)))
            return
        th = info["theta"]
        W = th.x.shape[0]
        for N in self.n_list:
            thN = _cloud(th, N)
            full = reduced_coefficients(c, k, thN, xi=th)
            emp = reduced_coefficients(c, k, thN, xi=thN)
            # control of the copies is the mean-field one; the law is the N-point cloud
            a = full.alpha
            nuN = minimize_H(c, k, thN, thN.x)
            dmu = _self_atom(dmu_H(c, k, thN, a, thN.x, nuN, thN.x))
            terms = {"EB": emp.B - full.B, "ESigma": emp.Sigma - full.Sigma,
                     "ESigma0": emp.Sigma0 - full.Sigma0, "EF": emp.F - full.F + dmu / N}
            for key, e in terms.items():
                sq = np.sum(e.reshape(W, N, -1) ** 2, axis=-1)
                self.acc[N][key] += float(np.mean(sq)) * dt


def build_coupled_copies(coeffs, config, bundle, n_list, method="picard"):
    """Solve the mean-field system once and attach copies to the first ``max(n_list)`` players.

    Parameters
    ----------
    coeffs : CoefficientSet
    config : MkvConfig
        ``config.particles`` is the auxiliary cloud size ``M_aux``.
    bundle : NoiseBundle
        Must carry at least ``M_aux`` paths; the N-player games must use
        :func:`mfglab.noise.restrict_players` of the same bundle.
    n_list : sequence of int
    method : {"picard", "auto"}
        ``"auto"`` falls back to continuation when Picard fails.
    """
    n_list = sorted({int(N) for N in n_list})
    Nmax = n_list[-1]
    if bundle.paths < config.particles or config.particles < Nmax:
        raise ConfigurationError(
            f"need M_aux >= max(N) = {Nmax} and a bundle with >= M_aux paths "
            f"(M_aux = {config.particles}, bundle paths = {bundle.paths})")
    hook = _ErrorTerms(coeffs, n_list, bundle.grid)
    run = picard_solve if method == "picard" else solve
    sol = run(coeffs, config, bundle, keep=Nmax, on_step=hook)
    K = bundle.grid.K
    return CoupledCopies(sol, sol.theta.X, sol.alpha[:K], hook.acc, bundle.grid, bundle.seed)


def ks_identical_marginals(copies, i=0, j=1, k=None):
    """Two-sample Kolmogorov-Smirnov test of ``X^i_k`` against ``X^j_k`` across worlds.

    Uses the first state coordinate; ``k`` defaults to the terminal step.
    """
    k = copies.grid.K if k is None else k
    return stats.ks_2samp(copies.X[k, :, i, 0], copies.X[k, :, j, 0])


# --------------------------------------------------------------------------
# gap metrics and rates

@dataclass
class GapReport:
    N: int
    state_gap: float
    control_gap: float
    diagnostics: dict = field(default_factory=dict)


def gap_metrics(copies, ne, grid):
    """State and control gaps between the copies and an N-player solution.

    ``state_gap = (1/N) sum_i mean_r max_k |X^i - X^{N,i}|^2`` and
    ``control_gap = (1/N) sum_i mean_r sum_k |alpha^i - alpha^{N,i}|^2 dt``.
    """
    if ne.grid != grid or copies.grid != grid:
        raise ConfigurationError("copies, N-player solution and grid must share one time grid")
    N = ne.N
    Xc, ac = copies.players(N)
    if ne.X.shape != Xc.shape or ne.alpha.shape != ac.shape:
        raise ConfigurationError(
            f"shape mismatch: copies {Xc.shape}/{ac.shape} vs N-player {ne.X.shape}/"
            f"{ne.alpha.shape}; the bundles must coincide")
    dx = np.sum((Xc - ne.X) ** 2, axis=-1)                 # (K+1, R, N)
    da = np.sum((ac - ne.alpha) ** 2, axis=-1)             # (K, R, N)
    state = float(np.mean(dx.max(axis=0)))
    control = float(np.mean(da.sum(axis=0)) * grid.dt)
    diag = dict(copies.diagnostics.get(N, {}))
    return GapReport(N, state, control, diag)


@dataclass
class RateFit:
    points: list
    slope: float
    intercept: float
    r2: float


def rate_fit(reports, which="state"):
    """Least-squares line through ``(log N, log gap)``.

    ``which`` is ``"state"``, ``"control"`` or a diagnostic key (``"EF"``...).
    Reports may also be plain ``(N, gap)`` pairs.
    """
    pts = []
    for r in reports:
        if isinstance(r, GapReport):
            val = {"state": r.state_gap, "control": r.control_gap}.get(which)
            if val is None:
                val = r.diagnostics[which]
            pts.append((r.N, float(val)))
        else:
            pts.append((int(r[0]), float(r[1])))
    if len({N for N, _ in pts}) < 3:
        raise ConfigurationError("rate_fit needs at least 3 distinct N")
    if any(not v > 0 for _, v in pts):
        raise ConfigurationError("rate_fit needs strictly positive gaps")
    lx = np.log([N for N, _ in pts])
    ly = np.log([v for _, v in pts])
    fit = stats.linregress(lx, ly)
    r2 = float(fit.rvalue ** 2) if np.ptp(ly) > 0 else 1.0
    return RateFit(pts, float(fit.slope), float(fit.intercept), r2)


# --------------------------------------------------------------------------
# Riccati oracle

@dataclass
class RiccatiSolution:
    """Backward LQR recursion on the Euler grid.

    ``K (K+1, n, n)``; ``gain (K, l, n)`` with ``alpha_k = -gain[k] x_k``.
    """

    K: np.ndarray
    gain: np.ndarray
    grid: object

    @property
    def K0(self):
        return self.K[0]

    def value(self, x0):
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        return float(0.5 * x0 @ self.K[0] @ x0)

    def adjoint(self, k, x):
        """``Y_k = K_k x``."""
        return np.asarray(x, dtype=float) @ self.K[k].T

    def control(self, k, x):
        return -(np.asarray(x, dtype=float) @ self.gain[k].T)


def _deterministic(lq):
    zero = ("C", "D", "C0", "D0", "Qbar", "S", "Pbar", "QbarT", "ST")
    return not any(np.any(getattr(lq, name)) for name in zero) and lq.c2 == 0


def riccati_oracle(lq, grid):
    """Discrete-time LQR recursion for the deterministic, interaction-free LQ case.

    ``K_k = K_{k+1} + (Q + A^T K_{k+1} + K_{k+1} A) dt
    - K_{k+1} B c1 (P + dt c1^2 B^T K_{k+1} B)^{-1} c1 B^T K_{k+1} dt`` with
    ``K_K = QT`` and ``gain_k = (P + dt c1^2 B^T K_{k+1} B)^{-1} c1 B^T K_{k+1}``.

    This is a first-order scheme for the continuous Riccati equation.  The
    exact LQR recursion of the Euler-discretised problem carries extra
    ``O(dt^2)`` terms per step (it sandwiches the update between
    ``I + A dt``), so the particle solver agrees with this oracle to ``O(dt)``.
    """
    if not _deterministic(lq):
        raise UnsupportedError(
            "Riccati oracle needs C = D = C0 = D0 = 0, Qbar = S = Pbar = 0 and c2 = 0")
    dt, Kn, c1 = grid.dt, grid.K, lq.c1
    Ks = np.empty((Kn + 1, lq.n, lq.n))
    gain = np.empty((Kn, lq.l, lq.n))
    Ks[Kn] = lq.QT
    for k in range(Kn - 1, -1, -1):
        A, B, Q, P = lq.at("A", k), lq.at("B", k), lq.at("Q", k), lq.at("P", k)
        Kp = Ks[k + 1]
        M = P + dt * c1 ** 2 * B.T @ Kp @ B
        gain[k] = np.linalg.solve(M, c1 * B.T @ Kp)
        Kk = Kp + (Q + A.T @ Kp + Kp @ A) * dt - (Kp @ B * c1) @ gain[k] * dt
        Ks[k] = 0.5 * (Kk + Kk.T)
    return RiccatiSolution(Ks, gain, grid)
