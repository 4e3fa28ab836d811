"""Pooled least-squares projections used for conditional expectations."""
import numpy as np

from . import _kernels


def affine_features(blocks):
    """``[1, blocks...]`` with every block of shape ``(S, k_b)``."""
    S = blocks[0].shape[0]
    return np.concatenate([np.ones((S, 1))] + list(blocks), axis=1)


def quadratic_features(blocks):
    """Affine features plus all distinct pairwise products of their columns."""
    lin = np.concatenate(list(blocks), axis=1)
    iu, ju = np.triu_indices(lin.shape[1])
    return np.concatenate([np.ones((lin.shape[0], 1)), lin, lin[:, iu] * lin[:, ju]], axis=1)


def make_features(blocks, order):
    if order == "affine":
        return affine_features(blocks)
    if order == "quadratic":
        return quadratic_features(blocks)
    raise ValueError(f"unknown basis order {order!r}")


class Projection:
    """Least-squares projection onto the span of fixed features.

    ``F`` must carry the constant feature in column 0.  The remaining
    columns are centred and scaled internally (a correlation-matrix solve);
    columns with no spread are dropped and their effect is absorbed by the
    intercept.  When the correlation matrix is numerically singular a ridge
    penalty is added and :attr:`ridged` is set.  Coefficients are returned
    in the raw feature basis, so they can be stored and re-applied to new
    features.
    """

    def __init__(self, F, ridge=1e-8, cond_limit=1e12):
        F = np.ascontiguousarray(F, dtype=float)
        S, p = F.shape
        self.p, self._S, self._F = p, S, F
        F1 = F[:, 1:]
        mean = F1.mean(axis=0)
        G, _ = _kernels.centered_gram(F1, np.zeros((S, 0)), mean)
        std = np.sqrt(np.clip(np.diag(G) / S, 0.0, None))
        keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.keep = keep
        self.cols = 1 + np.flatnonzero(keep)
        self.mean, self.std = mean, std
        self.ridged = False
        self._chol = None
        if keep.any():
            ks = std[keep]
            corr = G[np.ix_(keep, keep)] / S / np.outer(ks, ks)
            w = np.linalg.eigvalsh(corr)
            self.ridged = not (w.min() > w.max() / cond_limit)
            if self.ridged:
                corr = corr + ridge * np.eye(corr.shape[0])
            self._chol = np.linalg.cholesky(corr)

    def fit(self, T):
        """Raw-basis coefficients ``(p, q)`` for targets ``T: (S, q)``."""
        T = np.ascontiguousarray(T, dtype=float).reshape(self._S, -1)
        coef = np.zeros((self.p, T.shape[1]))
        tmean = T.mean(axis=0)
        coef[0] = tmean
        if self._chol is not None:
            _, R = _kernels.centered_gram(self._F[:, 1:], T, self.mean)
            ks = self.std[self.keep]
            rhs = R[self.keep] / self._S / ks[:, None]
            L = self._chol
            cs = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
            slopes = cs / ks[:, None]
            coef[self.cols] = slopes
            coef[0] = tmean - self.mean[self.keep] @ slopes
        return coef

    def fitted(self, coef):
        """Fitted values on the training features."""
        return self._F @ coef


def predict(F, coef):
    """Apply raw-basis coefficients to features ``F: (S, p)``."""
    return F @ coef
