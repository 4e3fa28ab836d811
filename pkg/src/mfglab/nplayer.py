"""N-player adjoint FBSDE system and open-loop Nash controls.

Each repetition is an independent copy of the whole game (one common path,
``N`` idiosyncratic paths).  Player ``i`` carries adjoints ``Y^{i,j}`` for
every state ``x^j``.  Conditional expectations are pooled across
repetitions and, using exchangeability of the players, across player
indices: diagonal components ``Y^{i,i}`` are regressed on ``(1, x^i, xbar)``
and off-diagonal ones ``Y^{i,j}`` on ``(1, x^i, x^j, xbar)``.  The same
Pontryagin-type time stepping as the mean-field solver is used (controls
and drivers at step ``k`` see ``E[Y_{k+1} | F_k]``), so for ``N = 1`` both
solvers discretise the same problem.

The backward equation integrates ``Z^{i,j,k}`` against ``dW^k``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DivergenceError, SolverError, UnsupportedError
from .hamiltonian import Theta, foc_residual, minimize_H
from .regression import Projection, make_features

MAX_PLAYERS = 32
MAX_REPETITIONS = 512


@dataclass(frozen=True)
class NeConfig:
    grid: object
    repetitions: int
    damping: float = 0.5
    picard_tol: float = 1e-6
    max_picard: int = 200
    foc_tol: float = 1e-6
    basis: str = "affine"
    ridge: float = 1e-8
    adaptive_damping: bool = True
    min_damping: float = 1.0 / 64
    zeta_tol: float = 1e-13
    zeta_max_iter: int = 200
    store: str = "diagonal"
    divergence_bound: float = 1e8
    enforce_caps: bool = True

    def __post_init__(self):
        bad = []
        if self.repetitions < 1:
            bad.append("repetitions must be >= 1")
        if self.enforce_caps and self.repetitions > MAX_REPETITIONS:
            bad.append(f"repetitions must be <= {MAX_REPETITIONS}")
        if not 0 < self.damping <= 1:
            bad.append("damping must lie in (0, 1]")
        if not self.picard_tol > 0 or not self.foc_tol > 0:
            bad.append("tolerances must be > 0")
        if self.basis not in ("affine", "quadratic"):
            bad.append("basis must be 'affine' or 'quadratic'")
        if self.store not in ("diagonal", "full"):
            bad.append("store must be 'diagonal' or 'full'")
        if bad:
            raise ConfigurationError("; ".join(bad), bad)


@dataclass
class NeSolution:
    """Converged (or last) N-player iterate.

    Diagonal arrays (always present), shapes with ``R`` repetitions::

        X (K+1, R, N, n)     Y (K+1, R, N, n)  [Y^{i,i}]
        Yhat (K, R, N, n)    Z (K, R, N, n, d) [Z^{i,i,i}]   Z0 (K, R, N, n, d)
        alpha (K, R, N, l)   zeta (K, R, N, l)

    With ``store="full"`` the tensors ``Y_full (K+1, R, N, N, n)``,
    ``Zjj (K, R, N, N, n, d)`` [Z^{i,j,j}], ``Z0_full (K, R, N, N, n, d)`` and
    ``Zcross (K, R, N, N, n, d)`` [Z^{i,i,k}] are kept as well.
    """

    N: int
    X: np.ndarray
    Y: np.ndarray
    Yhat: np.ndarray
    Z: np.ndarray
    Z0: np.ndarray
    alpha: np.ndarray
    zeta: np.ndarray
    residual_history: list
    converged: bool
    foc_residual_max: float
    grid: object
    full: dict = field(default_factory=dict)
    damping_history: list = field(default_factory=list)
    ridged_steps: int = 0

    def theta(self, k):
        return Theta(self.X[k], self.Yhat[k], self.Z[k], self.Z0[k])


class NeField:
    """Regression coefficients of ``(Yhat, Z^{.,j,j}, Z0)`` for diagonal and off-diagonal pairs."""

    def __init__(self, K, N, n, d, order):
        self.N, self.n, self.d, self.order = N, n, d, order
        self.use_mean = N > 1
        q = n + 2 * n * d
        self.cD = np.zeros((K, self._width(2 if self.use_mean else 1), q))
        self.cO = np.zeros((K, self._width(3), q)) if N > 1 else None
        I, J = np.nonzero(~np.eye(N, dtype=bool))
        self.I, self.J = I, J

    def _width(self, blocks):
        k = blocks * self.n
        return 1 + k if self.order == "affine" else 1 + k + k * (k + 1) // 2

    def copy(self):
        out = NeField.__new__(NeField)
        out.__dict__.update(self.__dict__)
        out.cD = self.cD.copy()
        out.cO = None if self.cO is None else self.cO.copy()
        return out

    def blend(self, other, rho):
        out = self.copy()
        out.cD = (1 - rho) * self.cD + rho * other.cD
        if self.cO is not None:
            out.cO = (1 - rho) * self.cO + rho * other.cO
        return out

    def feat_diag(self, x):
        R, N, n = x.shape
        blocks = [x.reshape(R * N, n)]
        if self.use_mean:
            xb = np.broadcast_to(x.mean(axis=1)[:, None, :], x.shape)
            blocks.append(xb.reshape(R * N, n))
        return make_features(blocks, self.order)

    def feat_off(self, x):
        R, N, n = x.shape
        P = self.I.size
        xb = np.broadcast_to(x.mean(axis=1)[:, None, :], (R, P, n))
        blocks = [x[:, self.I].reshape(R * P, n), x[:, self.J].reshape(R * P, n),
                  xb.reshape(R * P, n)]
        return make_features(blocks, self.order)

    def unpack(self, vD, vO, R):
        """Assemble ``(Y, Zjj, Z0)`` tensors ``(R, N, N, .)`` from fitted values."""
        N, n, d = self.N, self.n, self.d
        Y = np.empty((R, N, N, n))
        Z = np.empty((R, N, N, n, d))
        Z0 = np.empty((R, N, N, n, d))
        ii = np.arange(N)
        vD = vD.reshape(R, N, -1)
        Y[:, ii, ii] = vD[..., :n]
        Z[:, ii, ii] = vD[..., n:n + n * d].reshape(R, N, n, d)
        Z0[:, ii, ii] = vD[..., n + n * d:].reshape(R, N, n, d)
        if vO is not None:
            vO = vO.reshape(R, self.I.size, -1)
            Y[:, self.I, self.J] = vO[..., :n]
            Z[:, self.I, self.J] = vO[..., n:n + n * d].reshape(R, -1, n, d)
            Z0[:, self.I, self.J] = vO[..., n + n * d:].reshape(R, -1, n, d)
        return Y, Z, Z0

    def evaluate(self, k, x):
        R = x.shape[0]
        vD = self.feat_diag(x) @ self.cD[k]
        vO = None if self.cO is None else self.feat_off(x) @ self.cO[k]
        return self.unpack(vD, vO, R)


def _diag(T):
    N = T.shape[1]
    ii = np.arange(N)
    return T[:, ii, ii]


def zeta_eval(coeffs, k, x, Y, Z, Z0, alpha):
    """Control-interaction field ``zeta^i`` for every player, shape ``(R, N, l)``.

    ``x: (R, N, n)``; ``Y: (R, N, N, n)`` with ``Y[:, i, j] = Y^{i,j}``;
    ``Z``, ``Z0``: ``(R, N, N, n, d)`` with ``Z[:, i, j] = Z^{i,j,j}``;
    ``alpha: (R, N, l)``.  Derivatives are evaluated at the empirical law of
    ``(x, alpha)``.
    """
    if not coeffs.measure_slots_complete:
        raise UnsupportedError("model does not expose its control-law derivatives")
    R, N, _ = x.shape
    zeta = np.zeros((R, N, coeffs.l))
    mu, nu = x, alpha
    if coeffs.dnu_f2 is not None:
        D = coeffs.dnu_f2(k, x, mu, nu, alpha)            # (R, P_i, V_i, l)
        zeta += _diag(D) / N
    if coeffs.dnu_b2 is not None:
        D = coeffs.dnu_b2(k, x, mu, nu, alpha)            # (R, j, i, n, l)
        zeta += np.einsum("rjiam,rija->rim", D, Y) / N
    if coeffs.dnu_sigma2 is not None:
        D = coeffs.dnu_sigma2(k, x, mu, nu, alpha)        # (R, j, i, n, d, l)
        zeta += np.einsum("rjiaqm,rijaq->rim", D, Z) / N
    if coeffs.dnu_sigma02 is not None:
        D = coeffs.dnu_sigma02(k, x, mu, nu, alpha)
        zeta += np.einsum("rjiaqm,rijaq->rim", D, Z0) / N
    return zeta


def _controls(coeffs, k, x, Y, Z, Z0, cfg):
    """Solve ``alpha = Lambda(theta, L^N(x), zeta(alpha))`` by fixed-point iteration."""
    th = Theta(x, _diag(Y), _diag(Z), _diag(Z0))
    has_zeta = any(getattr(coeffs, s) is not None
                   for s in ("dnu_f2", "dnu_b2", "dnu_sigma2", "dnu_sigma02"))
    zeta = np.zeros(x.shape[:-1] + (coeffs.l,))
    a = minimize_H(coeffs, k, th, x, zeta)
    if not has_zeta:
        return a, zeta, th
    for _ in range(cfg.zeta_max_iter):
        new = zeta_eval(coeffs, k, x, Y, Z, Z0, a)
        change = np.abs(new - zeta).max()
        zeta = new
        a = minimize_H(coeffs, k, th, x, zeta)
        if change <= cfg.zeta_tol * (1.0 + np.abs(zeta).max()):
            return a, zeta, th
    raise SolverError(f"control/zeta fixed point did not settle at step {k}")


def _driver(coeffs, k, x, a, Y, Z, Z0):
    """``d_{x_j} H^{N,i}`` for all ``(i, j)``, shape ``(R, N, N, n)``."""
    R, N, n = x.shape
    mu, nu = x, a
    out = np.einsum("rjam,rija->rijm", coeffs.dx_b(k, x, a, mu, nu), Y)
    out += np.einsum("rjaqm,rijaq->rijm", coeffs.dx_sigma(k, x, a, mu, nu), Z)
    out += np.einsum("rjaqm,rijaq->rijm", coeffs.dx_sigma0(k, x, a, mu, nu), Z0)
    ii = np.arange(N)
    out[:, ii, ii] += coeffs.dx_f(k, x, a, mu, nu)
    if coeffs.dmu_f is not None:
        out += coeffs.dmu_f(k, x, a, mu, nu, x) / N
    if coeffs.dmu_b is not None:
        out += np.einsum("rkjam,rika->rijm", coeffs.dmu_b(k, x, a, mu, nu, x), Y) / N
    if coeffs.dmu_sigma is not None:
        out += np.einsum("rkjaqm,rikaq->rijm", coeffs.dmu_sigma(k, x, a, mu, nu, x), Z) / N
    if coeffs.dmu_sigma0 is not None:
        out += np.einsum("rkjaqm,rikaq->rijm", coeffs.dmu_sigma0(k, x, a, mu, nu, x), Z0) / N
    return out


def _terminal(coeffs, x):
    R, N, n = x.shape
    out = np.zeros((R, N, N, n))
    ii = np.arange(N)
    out[:, ii, ii] = coeffs.dx_g(x, x)
    if coeffs.dmu_g is not None:
        out += coeffs.dmu_g(x, x, x) / N
    return out


def _forward(coeffs, fld, X, bundle, cfg, old=None):
    grid = bundle.grid
    K, dt = grid.K, grid.dt
    R, N = X.shape[1], X.shape[2]
    sq = 0.0
    x_old = X[0].copy() if old is not None else None
    for k in range(K):
        xk = X[k]
        Y, Z, Z0 = fld.evaluate(k, xk)
        a, _, _ = _controls(coeffs, k, xk, Y, Z, Z0, cfg)
        if old is not None:
            Yo, Zo, Z0o = old.evaluate(k, x_old)
            sq += dt * (np.sum((xk - x_old) ** 2) + np.sum((Y - Yo) ** 2)
                        + np.sum((Z - Zo) ** 2) + np.sum((Z0 - Z0o) ** 2))
        B = coeffs.b(k, xk, a, xk, a)
        S = coeffs.sigma(k, xk, a, xk, a)
        S0 = coeffs.sigma0(k, xk, a, xk, a)
        xn = _kernels.euler(xk, B, S, bundle.idio_step(k), S0, bundle.common_step(k), dt)
        if not np.all(np.isfinite(xn)) or np.abs(xn).max() > cfg.divergence_bound:
            raise DivergenceError(f"N-player state diverged at step {k + 1}", step=k + 1)
        if old is not None:
            x_old = X[k + 1].copy()
        X[k + 1] = xn
    return None if old is None else float(np.sqrt(sq / (R * N)))


def _backward(coeffs, X, bundle, cfg, record=None):
    grid = bundle.grid
    K, dt = grid.K, grid.dt
    R, N, n = X.shape[1], X.shape[2], X.shape[3]
    d = bundle.d
    fld = NeField(K, N, n, d, cfg.basis)
    I, J = fld.I, fld.J
    ii = np.arange(N)
    y_next = _terminal(coeffs, X[K])
    if record is not None:
        record(K, {"x": X[K], "Y": y_next})
    ridged = 0
    for k in range(K - 1, -1, -1):
        xk = X[k]
        dW = bundle.idio_step(k)                      # (R, N, d)
        dW0 = bundle.common_step(k)                   # (R, d)
        pD = Projection(fld.feat_diag(xk), ridge=cfg.ridge)
        ridged += pD.ridged
        yD = y_next[:, ii, ii].reshape(R * N, n)
        cyD = pD.fit(yD)
        eD = (yD - pD.fitted(cyD)).reshape(R, N, n)
        tD = np.concatenate([(eD[..., :, None] * dW[:, :, None, :]).reshape(R * N, n * d),
                             (eD[..., :, None] * dW0[:, None, None, :]).reshape(R * N, n * d)],
                            axis=1) / dt
        fld.cD[k] = np.concatenate([cyD, pD.fit(tD)], axis=1)
        vO = None
        if N > 1:
            pO = Projection(fld.feat_off(xk), ridge=cfg.ridge)
            ridged += pO.ridged
            P = I.size
            yO = y_next[:, I, J].reshape(R * P, n)
            cyO = pO.fit(yO)
            eO = (yO - pO.fitted(cyO)).reshape(R, P, n)
            tO = np.concatenate(
                [(eO[..., :, None] * dW[:, J, None, :]).reshape(R * P, n * d),
                 (eO[..., :, None] * dW0[:, None, None, :]).reshape(R * P, n * d)], axis=1) / dt
            fld.cO[k] = np.concatenate([cyO, pO.fit(tO)], axis=1)
            vO = pO.fitted(fld.cO[k])
        vD = pD.fitted(fld.cD[k])
        Y, Z, Z0 = fld.unpack(vD, vO, R)
        a, zeta, th = _controls(coeffs, k, xk, Y, Z, Z0, cfg)
        yk = Y + _driver(coeffs, k, xk, a, Y, Z, Z0) * dt
        if record is not None:
            info = {"x": xk, "Yhat": Y, "Z": Z, "Z0": Z0, "Y": yk, "alpha": a, "zeta": zeta,
                    "theta": th}
            if cfg.store == "full":
                zc = np.empty((R, N, N, n, d))
                zc[:, ii, ii] = Z[:, ii, ii]
                if N > 1:
                    tC = (eD[:, I, :, None] * dW[:, J, None, :]).reshape(R * I.size, n * d) / dt
                    zc[:, I, J] = pO.fitted(pO.fit(tC)).reshape(R, I.size, n, d)
                info["Zcross"] = zc
            record(k, info)
        y_next = yk
    return fld, ridged


def _check_bundle(bundle, N, cfg):
    if cfg.enforce_caps and N > MAX_PLAYERS:
        raise ConfigurationError(f"N = {N} exceeds the cap of {MAX_PLAYERS} players")
    if bundle.paths != N:
        raise ConfigurationError(f"bundle carries {bundle.paths} paths, expected N = {N}")
    if bundle.worlds < cfg.repetitions:
        raise ConfigurationError("bundle has fewer worlds than repetitions")
    if bundle.grid != cfg.grid:
        raise ConfigurationError("bundle grid differs from solver grid")


def ne_picard_solve(coeffs, config, bundle, initial=None):
    """Damped Picard iteration for the N-player system.

    ``bundle`` must already be restricted to ``N`` players (see
    :func:`mfglab.noise.restrict_players`); its first ``config.repetitions``
    worlds are used.  ``initial`` may be a previous :class:`NeField`.
    """
    from .noise import restrict_worlds
    N = bundle.paths
    _check_bundle(bundle, N, config)
    bundle = restrict_worlds(bundle, config.repetitions)
    grid = bundle.grid
    K, n, d, R = grid.K, coeffs.n, bundle.d, config.repetitions
    fld = initial.copy() if initial is not None else NeField(K, N, n, d, config.basis)
    X = np.empty((K + 1, R, N, n))
    X[0] = bundle.initial_states
    history, rhos = [], []
    rho = config.damping
    converged = False
    try:
        _forward(coeffs, fld, X, bundle, config)
        for _ in range(config.max_picard):
            new_hat, _ = _backward(coeffs, X, bundle, config)
            new = fld.blend(new_hat, rho)
            res = _forward(coeffs, new, X, bundle, config, old=fld)
            history.append(res)
            rhos.append(rho)
            fld = new
            if res <= config.picard_tol:
                converged = True
                break
            if (config.adaptive_damping and len(history) >= 2 and res > history[-2]
                    and rho > config.min_damping):
                rho = max(rho / 2, config.min_damping)
    except DivergenceError as err:
        err.residual_history = history
        raise
    return _materialize(coeffs, config, bundle, X, fld, history, rhos, converged)


def _materialize(coeffs, cfg, bundle, X, fld, history, rhos, converged):
    grid = bundle.grid
    K = grid.K
    R, N, n = X.shape[1], X.shape[2], X.shape[3]
    d, l = bundle.d, coeffs.l
    Y = np.empty((K + 1, R, N, n))
    Yhat = np.empty((K, R, N, n))
    Z = np.empty((K, R, N, n, d))
    Z0 = np.empty((K, R, N, n, d))
    alpha = np.empty((K, R, N, l))
    zeta = np.empty((K, R, N, l))
    full = {}
    if cfg.store == "full":
        full = {"Y_full": np.empty((K + 1, R, N, N, n)), "Zjj": np.empty((K, R, N, N, n, d)),
                "Z0_full": np.empty((K, R, N, N, n, d)), "Zcross": np.empty((K, R, N, N, n, d))}
    ii = np.arange(N)

    def record(k, info):
        Y[k] = info["Y"][:, ii, ii]
        if full:
            full["Y_full"][k] = info["Y"]
        if k == K:
            return
        Yhat[k] = info["Yhat"][:, ii, ii]
        Z[k] = info["Z"][:, ii, ii]
        Z0[k] = info["Z0"][:, ii, ii]
        alpha[k] = info["alpha"]
        zeta[k] = info["zeta"]
        if full:
            full["Zjj"][k] = info["Z"]
            full["Z0_full"][k] = info["Z0"]
            full["Zcross"][k] = info["Zcross"]

    _, ridged = _backward(coeffs, X, bundle, cfg, record)
    sol = NeSolution(N, X, Y, Yhat, Z, Z0, alpha, zeta, history, converged, np.nan, grid, full,
                     rhos, ridged)
    sol.foc_residual_max = ne_residual(sol, coeffs)
    if sol.converged and not sol.foc_residual_max <= cfg.foc_tol:
        sol.converged = False
    return sol


def ne_residual(solution, coeffs):
    """Largest first-order-condition residual over repetitions, players and steps."""
    worst = 0.0
    for k in range(solution.grid.K):
        th = solution.theta(k)
        r = foc_residual(coeffs, k, th, th.x, solution.zeta[k], solution.alpha[k])
        worst = max(worst, float(np.max(r)))
    return worst
