"""Particle solver for the conditional McKean-Vlasov FBSDE.

Discretisation
--------------
``W`` worlds (common-noise paths) carry ``M`` particles each.  The
conditional law at step ``k`` is the empirical law of the world's particles.
Conditional expectations are least-squares projections pooled over all
worlds on features of ``(x, m)``, where ``m`` is the world's mean state; the
common increment is independent of these features, which is what allows
``Z0`` to be estimated at all.

The backward step is the explicit discrete Pontryagin scheme::

    Yhat_k = E[Y_{k+1} | F_k]
    Z_k    = E[(Y_{k+1} - Yhat_k) dW_k^T | F_k] / dt      (same for Z0, dW0)
    Y_k    = Yhat_k + F(X_k, Yhat_k, Z_k, Z0_k; cloud) dt

and the forward step uses the same quadruple ``(X_k, Yhat_k, Z_k, Z0_k)``, so
the control at step ``k`` is optimal for the Euler-discretised problem.

Picard iterates are represented by their decoupling field: the regression
coefficients of ``(Yhat, Z, Z0)`` at every step.  Damping acts on these
coefficients and the states are regenerated by a forward sweep.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ConvergenceError, DivergenceError
from .hamiltonian import Theta, minimize_H, reduced_coefficients, terminal_G
from .measures import EmpiricalMeasure
from .noise import ROLE_AUX, TimeGrid, restrict_players, restrict_worlds, stream
from .regression import Projection, make_features


@dataclass(frozen=True)
class ContinuationConfig:
    enabled: bool = True
    eta0: float = 0.25
    min_step: float = 1e-4


@dataclass(frozen=True)
class MkvConfig:
    """Algorithmic parameters of the particle solver."""

    grid: TimeGrid
    worlds: int
    particles: int
    damping: float = 0.5
    picard_tol: float = 1e-6
    max_picard: int = 200
    continuation: ContinuationConfig = field(default_factory=ContinuationConfig)
    basis: str = "affine"
    ridge: float = 1e-8
    adaptive_damping: bool = True
    min_damping: float = 1.0 / 64
    divergence_bound: float = 1e8

    def __post_init__(self):
        bad = []
        if self.worlds < 1:
            bad.append("worlds must be >= 1")
        if self.particles < 1:
            bad.append("particles must be >= 1")
        if not 0 < self.damping <= 1:
            bad.append("damping must lie in (0, 1]")
        if not self.picard_tol > 0:
            bad.append("picard_tol must be > 0")
        if self.max_picard < 1:
            bad.append("max_picard must be >= 1")
        if self.basis not in ("affine", "quadratic"):
            bad.append("basis must be 'affine' or 'quadratic'")
        if not self.ridge > 0:
            bad.append("ridge must be > 0")
        c = self.continuation
        if not (0 < c.min_step <= c.eta0 <= 1):
            bad.append("continuation steps must satisfy 0 < min_step <= eta0 <= 1")
        if bad:
            raise ConfigurationError("; ".join(bad), bad)


@dataclass
class ThetaPath:
    """Stored ``(X, Y, Z, Z0)`` paths, shapes ``(K+1, W, M, .)``.

    ``Z`` and ``Z0`` at the terminal node are zero (no increment follows).
    ``Yhat`` holds ``E[Y_{k+1} | F_k]`` for ``k < K``.
    """

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    Z0: np.ndarray
    Yhat: np.ndarray

    @property
    def worlds(self):
        return self.X.shape[1]

    @property
    def particles(self):
        return self.X.shape[2]

    def theta(self, k):
        """Control-relevant quadruple at step ``k`` (uses ``Yhat`` before ``K``)."""
        y = self.Yhat[k] if k < self.Yhat.shape[0] else self.Y[k]
        return Theta(self.X[k], y, self.Z[k], self.Z0[k])

    def flat(self, world, k):
        lead = self.X.shape[2]
        return np.concatenate([self.X[k, world], self.Y[k, world],
                               self.Z[k, world].reshape(lead, -1),
                               self.Z0[k, world].reshape(lead, -1)], axis=1)


@dataclass
class MfeSolution:
    theta: ThetaPath
    alpha: np.ndarray
    F: np.ndarray
    residual_history: list
    converged: bool
    field: "DecouplingField"
    grid: TimeGrid
    complete: bool
    summary: dict
    martingale: np.ndarray
    ridged_steps: int = 0
    damping_history: list = field(default_factory=list)
    delta: float = 1.0
    trace: list = field(default_factory=list)

    def measure(self, world, k):
        """Conditional empirical law of ``(X_k, alpha_k)`` in one world."""
        if not self.complete:
            raise ValueError("only a subset of particles was stored; the cloud is incomplete")
        return EmpiricalMeasure(np.concatenate([self.theta.X[k, world], self.alpha[k, world]],
                                               axis=1))


class DecouplingField:
    """Per-step regression coefficients of ``(Yhat, Z, Z0)`` on ``(x, m)`` features."""

    def __init__(self, coef, n, d, order, use_mean=True):
        self.coef = coef
        self.n, self.d, self.order, self.use_mean = n, d, order, use_mean

    @staticmethod
    def width(n, order, use_mean):
        k = 2 * n if use_mean else n
        return 1 + k if order == "affine" else 1 + k + k * (k + 1) // 2

    @classmethod
    def zeros(cls, K, n, d, order, use_mean=True):
        p = cls.width(n, order, use_mean)
        return cls(np.zeros((K, p, n + 2 * n * d)), n, d, order, use_mean)

    def features(self, x, m):
        W, M, n = x.shape
        blocks = [x.reshape(W * M, n)]
        if self.use_mean:
            blocks.append(np.broadcast_to(m[:, None, :], x.shape).reshape(W * M, n))
        return make_features(blocks, self.order)

    def split(self, vals, lead):
        n, d = self.n, self.d
        return (vals[:, :n].reshape(lead + (n,)), vals[:, n:n + n * d].reshape(lead + (n, d)),
                vals[:, n + n * d:].reshape(lead + (n, d)))

    def evaluate(self, k, x, m=None):
        m = x.mean(axis=1) if m is None else m
        vals = self.features(x, m) @ self.coef[k]
        y, z, z0 = self.split(vals, x.shape[:-1])
        return Theta(x, y, z, z0)

    def blend(self, other, rho):
        return DecouplingField((1 - rho) * self.coef + rho * other.coef, self.n, self.d,
                               self.order, self.use_mean)


class _System:
    """Reduced coefficients of the interpolated system (``delta = 1`` is the target)."""

    def __init__(self, coeffs, delta=1.0):
        self.coeffs = coeffs
        self.delta = float(delta)

    def forward_terms(self, k, th):
        c = self.coeffs
        mu = th.x
        a = minimize_H(c, k, th, mu)
        B, S, S0 = c.b(k, th.x, a, mu, a), c.sigma(k, th.x, a, mu, a), c.sigma0(k, th.x, a, mu, a)
        d = self.delta
        if d != 1.0:
            B = d * B - (1 - d) * th.y
            S = d * S - (1 - d) * th.z
            S0 = d * S0 - (1 - d) * th.z0
        return B, S, S0, a

    def backward_terms(self, k, th):
        red = reduced_coefficients(self.coeffs, k, th)
        F = red.F
        if self.delta != 1.0:
            F = self.delta * F + (1 - self.delta) * th.x
        return F, red.alpha

    def terminal(self, x):
        G = terminal_G(self.coeffs, x, x)
        if self.delta != 1.0:
            G = self.delta * G + (1 - self.delta) * x
        return G


def _prepare_bundle(bundle, config):
    if bundle.worlds < config.worlds or bundle.paths < config.particles:
        raise ConfigurationError(
            f"bundle has {bundle.worlds} worlds x {bundle.paths} paths, "
            f"config needs {config.worlds} x {config.particles}")
    if bundle.grid != config.grid:
        raise ConfigurationError("bundle grid differs from solver grid")
    return restrict_players(restrict_worlds(bundle, config.worlds), config.particles)


def forward_step(coeffs, theta_guess, bundle, X=None, delta=1.0, bound=1e8, old_field=None):
    """Euler-Maruyama sweep driven by a decoupling-field guess.

    Parameters
    ----------
    theta_guess : DecouplingField
        Gives ``(Yhat, Z, Z0)`` as functions of ``(x, m)`` at every step; the
        conditional law at each step is the cloud of the current states.
    X : ndarray, optional
        ``(K+1, W, M, n)`` buffer overwritten in place (allocated if omitted).
    old_field : DecouplingField, optional
        When given, ``X`` must hold the states generated by ``old_field`` and
        the discrete H2 distance between the two iterates is returned too.

    Returns
    -------
    X, distance (``None`` without ``old_field``)
    """
    system = _System(coeffs, delta)
    grid = bundle.grid
    K, dt = grid.K, grid.dt
    W, M = bundle.worlds, bundle.paths
    if X is None:
        X = np.empty((K + 1, W, M, coeffs.n))
        X[0] = bundle.initial_states
    sq = 0.0
    x_old = X[0].copy() if old_field is not None else None
    for k in range(K):
        xk = X[k]
        th = theta_guess.evaluate(k, xk)
        B, S, S0, _ = system.forward_terms(k, th)
        if old_field is not None:
            tho = old_field.evaluate(k, x_old)
            sq += dt * (np.sum((xk - x_old) ** 2) + np.sum((th.y - tho.y) ** 2)
                        + np.sum((th.z - tho.z) ** 2) + np.sum((th.z0 - tho.z0) ** 2))
        xn = _kernels.euler(xk, B, S, bundle.idio_step(k), S0, bundle.common_step(k), dt)
        if not np.all(np.isfinite(xn)) or np.abs(xn).max() > bound:
            raise DivergenceError(f"state diverged at step {k + 1}", step=k + 1)
        if old_field is not None:
            x_old = X[k + 1].copy()
        X[k + 1] = xn
    dist = None if old_field is None else float(np.sqrt(sq / (W * M)))
    return X, dist


def backward_regress(coeffs, X, bundle, order="affine", ridge=1e-8, delta=1.0, on_step=None):
    """Backward regression sweep on fixed state paths.

    Returns the new :class:`DecouplingField` and the number of steps where
    the ridge fallback was needed.  ``on_step(k, info)`` is called at every
    node (``K`` first) with the quantities of that step.
    """
    system = _System(coeffs, delta)
    grid = bundle.grid
    K, dt = grid.K, grid.dt
    W, M, n = X.shape[1], X.shape[2], X.shape[3]
    d = bundle.d
    S = W * M
    fld = DecouplingField.zeros(K, n, d, order, use_mean=M > 1)
    y_next = system.terminal(X[K])
    if on_step is not None:
        on_step(K, {"x": X[K], "y": y_next})
    ridged = 0
    for k in range(K - 1, -1, -1):
        xk = X[k]
        proj = Projection(fld.features(xk, xk.mean(axis=1)), ridge=ridge)
        ridged += proj.ridged
        cy = proj.fit(y_next.reshape(S, n))
        yhat = proj.fitted(cy).reshape(W, M, n)
        resid = y_next - yhat
        dW = bundle.idio_step(k)
        dW0 = bundle.common_step(k)
        tz = resid[..., :, None] * dW[..., None, :] / dt
        tz0 = resid[..., :, None] * dW0[:, None, None, :] / dt
        cz = proj.fit(np.concatenate([tz.reshape(S, n * d), tz0.reshape(S, n * d)], axis=1))
        zz = proj.fitted(cz)
        th = Theta(xk, yhat, zz[:, :n * d].reshape(W, M, n, d), zz[:, n * d:].reshape(W, M, n, d))
        F, alpha = system.backward_terms(k, th)
        yk = yhat + F * dt
        fld.coef[k] = np.concatenate([cy, cz], axis=1)
        if on_step is not None:
            on_step(k, {"x": xk, "theta": th, "y": yk, "y_next": y_next, "F": F,
                        "alpha": alpha, "dW": dW, "dW0": dW0})
        y_next = yk
    return fld, ridged


def _initial_field(initial, K, n, d, order, use_mean, seed):
    if isinstance(initial, DecouplingField):
        return DecouplingField(initial.coef.copy(), n, d, order, use_mean)
    fld = DecouplingField.zeros(K, n, d, order, use_mean)
    if isinstance(initial, str) and initial == "zero":
        return fld
    if isinstance(initial, str) and initial == "random":
        rng = stream(seed, ROLE_AUX, 1)
        fld.coef[:] = rng.standard_normal(fld.coef.shape)
        return fld
    raise ConfigurationError(f"unknown initial guess {initial!r}")


def _picard(coeffs, config, bundle, initial, init_seed, delta):
    grid = bundle.grid
    K, n, d = grid.K, coeffs.n, bundle.d
    W, M = bundle.worlds, bundle.paths
    fld = _initial_field(initial, K, n, d, config.basis, M > 1, init_seed)
    X = np.empty((K + 1, W, M, n))
    X[0] = bundle.initial_states
    history, rhos = [], []
    rho = config.damping
    ridged = 0
    try:
        forward_step(coeffs, fld, bundle, X, delta, config.divergence_bound)
        for _ in range(config.max_picard):
            new_hat, r = backward_regress(coeffs, X, bundle, config.basis, config.ridge, delta)
            ridged = r
            new = fld.blend(new_hat, rho)
            _, res = forward_step(coeffs, new, bundle, X, delta, config.divergence_bound, fld)
            history.append(res)
            rhos.append(rho)
            fld = new
            if res <= config.picard_tol:
                return fld, X, history, rhos, True, ridged
            if (config.adaptive_damping and len(history) >= 2 and res > history[-2]
                    and rho > config.min_damping):
                rho = max(rho / 2, config.min_damping)
    except DivergenceError as err:
        err.residual_history = history
        raise
    return fld, X, history, rhos, False, ridged


class _Recorder:
    """Collects the materialised solution during the final backward sweep."""

    def __init__(self, K, W, M, keep, n, d, l, extra=None):
        self.keep = M if keep is None else min(keep, M)
        kp = self.keep
        self.X = np.empty((K + 1, W, kp, n))
        self.Y = np.empty((K + 1, W, kp, n))
        self.Yhat = np.empty((K, W, kp, n))
        self.Z = np.zeros((K + 1, W, kp, n, d))
        self.Z0 = np.zeros((K + 1, W, kp, n, d))
        self.alpha = np.empty((K + 1, W, kp, l))
        self.F = np.empty((K, W, kp, n))
        self.mart = np.empty((K, W, n))
        self.summary = {key: np.empty((K + 1, dim)) for key, dim in
                        (("mean_X", n), ("var_X", n), ("mean_Y", n),
                         ("mean_alpha", l), ("var_alpha", l))}
        self.extra = extra

    def __call__(self, k, info):
        kp = self.keep
        x = info["x"]
        self.X[k] = x[:, :kp]
        self.Y[k] = info["y"][:, :kp]
        s = self.summary
        s["mean_X"][k] = x.mean(axis=(0, 1))
        s["var_X"][k] = x.var(axis=(0, 1))
        s["mean_Y"][k] = info["y"].mean(axis=(0, 1))
        if "theta" in info:
            th = info["theta"]
            self.Yhat[k] = th.y[:, :kp]
            self.Z[k] = th.z[:, :kp]
            self.Z0[k] = th.z0[:, :kp]
            self.F[k] = info["F"][:, :kp]
            a = info["alpha"]
            incr = (np.einsum("wmiq,wmq->wmi", th.z, info["dW"])
                    + np.einsum("wmiq,wq->wmi", th.z0, info["dW0"]))
            self.mart[k] = (info["y_next"] - th.y - incr).mean(axis=1)
        else:
            a = self._terminal_alpha(k, info)
        self.alpha[k] = a[:, :kp]
        s["mean_alpha"][k] = a.mean(axis=(0, 1))
        s["var_alpha"][k] = a.var(axis=(0, 1))
        if self.extra is not None:
            self.extra(k, info)

    def _terminal_alpha(self, k, info):
        x, y = info["x"], info["y"]
        zero = np.zeros(x.shape + (self.Z.shape[-1],))
        return minimize_H(self.coeffs, k, Theta(x, y, zero, zero), x)


def _materialize(coeffs, config, bundle, X, keep, on_step):
    grid = bundle.grid
    rec = _Recorder(grid.K, bundle.worlds, bundle.paths, keep, coeffs.n, bundle.d, coeffs.l,
                    on_step)
    rec.coeffs = coeffs
    fld, ridged = backward_regress(coeffs, X, bundle, config.basis, config.ridge, 1.0, rec)
    theta = ThetaPath(rec.X, rec.Y, rec.Z, rec.Z0, rec.Yhat)
    return theta, rec, fld, ridged


def picard_solve(coeffs, config, bundle, initial="zero", init_seed=0, keep=None, on_step=None):
    """Damped Picard iteration on the decoupling field.

    Parameters
    ----------
    coeffs : CoefficientSet
    config : MkvConfig
    bundle : NoiseBundle
        Must provide at least ``config.worlds`` worlds and ``config.particles``
        paths; extra worlds/paths are ignored.
    initial : {"zero", "random"} or DecouplingField
        Starting iterate.  ``"random"`` draws standard normal coefficients
        from a stream keyed by ``init_seed``.
    keep : int, optional
        Store full paths only for the first ``keep`` particles of each world;
        summaries and martingale residuals always use the whole cloud.
    on_step : callable, optional
        ``on_step(k, info)`` hook called during the final sweep, ``k = K..0``,
        with full-cloud arrays (see :func:`backward_regress`).

    Returns
    -------
    MfeSolution
        ``converged`` is false when ``max_picard`` sweeps did not reach the
        tolerance; the solution is still materialised from the last iterate.
    """
    bundle = _prepare_bundle(bundle, config)
    fld, X, history, rhos, ok, _ = _picard(coeffs, config, bundle, initial, init_seed, 1.0)
    theta, rec, _, ridged = _materialize(coeffs, config, bundle, X, keep, on_step)
    return MfeSolution(theta, rec.alpha, rec.F, history, ok, fld, bundle.grid,
                       rec.keep == bundle.paths, rec.summary, rec.mart, ridged, rhos)


def continuation_solve(coeffs, config, bundle, keep=None, on_step=None):
    """Solve by marching the interpolation parameter from 0 to 1.

    The interpolated system replaces ``(B, Sigma, Sigma0, F, G)`` by
    ``delta * (.) - (1 - delta) * (y, z, z0)`` forward and
    ``delta * (.) + (1 - delta) * x`` backward.  Each stage is solved by
    damped Picard iteration warm-started from the previous stage; the step
    is halved on failure and the solve aborts once it drops below
    ``config.continuation.min_step``.
    """
    bundle = _prepare_bundle(bundle, config)
    cc = config.continuation
    trace = []
    fld = "zero"
    histories = []
    delta, eta = 0.0, cc.eta0
    target = 0.0
    while True:
        try:
            out = _picard(coeffs, config, bundle, fld, 0, target)
            ok = out[4]
        except DivergenceError:
            out, ok = None, False
        trace.append((target, ok))
        if ok:
            fld, X, history = out[0], out[1], out[2]
            histories.extend(history)
            delta = target
            if delta >= 1.0:
                break
            eta = min(cc.eta0, 2 * eta)
        else:
            if target == 0.0:
                raise ConvergenceError("the decoupled system failed to converge",
                                       residual_history=out[2] if out else [], trace=trace)
            eta /= 2
            if eta < cc.min_step:
                raise ConvergenceError(
                    f"continuation step fell below {cc.min_step:g} at delta={delta:.6g}",
                    residual_history=histories, trace=trace)
        target = min(1.0, delta + eta)
    theta, rec, _, ridged = _materialize(coeffs, config, bundle, X, keep, on_step)
    return MfeSolution(theta, rec.alpha, rec.F, histories, True, fld, bundle.grid,
                       rec.keep == bundle.paths, rec.summary, rec.mart, ridged, [], 1.0, trace)


def solve(coeffs, config, bundle, keep=None, on_step=None):
    """Direct Picard first; fall back to continuation when it fails."""
    try:
        sol = picard_solve(coeffs, config, bundle, keep=keep, on_step=on_step)
        if sol.converged or not config.continuation.enabled:
            return sol
    except DivergenceError:
        if not config.continuation.enabled:
            raise
    return continuation_solve(coeffs, config, bundle, keep=keep, on_step=on_step)


def extract_mfe(solution):
    """Return ``(alpha, measure_flow)``; ``measure_flow(world, k)`` is the conditional law.

    The flow is built from the stored ``(X, alpha)`` so the consistency
    condition holds by construction.
    """
    return solution.alpha, solution.measure


def h2_distance(a, b, grid):
    """Discrete H2 distance between two stored ``ThetaPath`` objects."""
    dt = grid.dt
    K = grid.K
    tot = 0.0
    for arr_a, arr_b in ((a.X, b.X), (a.Y, b.Y), (a.Z, b.Z), (a.Z0, b.Z0)):
        diff = arr_a[:K] - arr_b[:K]
        tot += np.sum(diff ** 2) * dt
    return float(np.sqrt(tot / (a.X.shape[1] * a.X.shape[2])))
