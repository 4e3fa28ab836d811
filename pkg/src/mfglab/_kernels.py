"""Hot loops with a numba implementation and a pure-numpy fallback.

The numba path is used when numba imports and the environment variable
``MFGLAB_NUMBA`` is not set to ``0``/``false``/``off``.  Both paths are
always importable as ``*_numpy`` / ``*_numba`` so they can be compared.

Reductions use a fixed chunking (``_CHUNKS`` contiguous blocks summed in
block order), so results do not depend on the number of worker threads.
"""
import os

import numpy as np

_CHUNKS = 64

try:
    import numba as nb
    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
        # try TBB last: probing an outdated TBB emits a warning on import
        nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAVE_NUMBA = False


def _flag_enabled():
    val = os.environ.get("MFGLAB_NUMBA", "1").strip().lower()
    return val not in ("0", "false", "off", "no")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()


def gram_numpy(F, T):
    """``(F^T F, F^T T)`` summed over rows in fixed block order."""
    S, p = F.shape
    q = T.shape[1]
    G = np.zeros((p, p))
    R = np.zeros((p, q))
    bounds = np.linspace(0, S, _CHUNKS + 1).astype(np.int64)
    for c in range(_CHUNKS):
        lo, hi = bounds[c], bounds[c + 1]
        if hi > lo:
            Fc = F[lo:hi]
            G += np.einsum("sp,sr->pr", Fc, Fc)
            R += np.einsum("sp,sq->pq", Fc, T[lo:hi])
    return G, R


def centered_gram_numpy(F, T, mean):
    """Gram of ``F - mean`` and its cross-moment with ``T`` (sums, not averages)."""
    S, p = F.shape
    q = T.shape[1]
    G = np.zeros((p, p))
    R = np.zeros((p, q))
    bounds = np.linspace(0, S, _CHUNKS + 1).astype(np.int64)
    for c in range(_CHUNKS):
        lo, hi = bounds[c], bounds[c + 1]
        if hi > lo:
            Fc = F[lo:hi] - mean
            G += np.einsum("sp,sr->pr", Fc, Fc)
            R += np.einsum("sp,sq->pq", Fc, T[lo:hi])
    return G, R


def euler_numpy(x, B, Sig, dW, Sig0, dW0, dt):
    """``x + B dt + Sig dW + Sig0 dW0`` for ``x: (W, M, n)``, ``dW0: (W, d)``."""
    return (x + B * dt + np.einsum("wmiq,wmq->wmi", Sig, dW)
            + np.einsum("wmiq,wq->wmi", Sig0, dW0))


if HAVE_NUMBA:
    njit_kwargs = {
        "nogil": True,
        "fastmath": False,
        "cache": True,
    }

    @nb.njit(parallel=True, **njit_kwargs)
    def gram_numba(F, T):
        """``(F^T F, F^T T)`` summed over rows in fixed block order."""
        S, p = F.shape
        q = T.shape[1]
        Gp = np.zeros((_CHUNKS, p, p))
        Rp = np.zeros((_CHUNKS, p, q))
        for c in nb.prange(_CHUNKS):
            lo = (S * c) // _CHUNKS
            hi = (S * (c + 1)) // _CHUNKS
            for s in range(lo, hi):
                for a in range(p):
                    fa = F[s, a]
                    for b in range(p):
                        Gp[c, a, b] += fa * F[s, b]
                    for b in range(q):
                        Rp[c, a, b] += fa * T[s, b]
        G = np.zeros((p, p))
        R = np.zeros((p, q))
        for c in range(_CHUNKS):
            G += Gp[c]
            R += Rp[c]
        return G, R

    @nb.njit(parallel=True, **njit_kwargs)
    def centered_gram_numba(F, T, mean):
        """Gram of ``F - mean`` and its cross-moment with ``T`` (sums, not averages)."""
        S, p = F.shape
        q = T.shape[1]
        Gp = np.zeros((_CHUNKS, p, p))
        Rp = np.zeros((_CHUNKS, p, q))
        for c in nb.prange(_CHUNKS):
            lo = (S * c) // _CHUNKS
            hi = (S * (c + 1)) // _CHUNKS
            f = np.empty(p)
            for s in range(lo, hi):
                for a in range(p):
                    f[a] = F[s, a] - mean[a]
                for a in range(p):
                    fa = f[a]
                    for b in range(a, p):
                        Gp[c, a, b] += fa * f[b]
                    for b in range(q):
                        Rp[c, a, b] += fa * T[s, b]
        G = np.zeros((p, p))
        R = np.zeros((p, q))
        for c in range(_CHUNKS):
            G += Gp[c]
            R += Rp[c]
        for a in range(p):
            for b in range(a):
                G[a, b] = G[b, a]
        return G, R

    @nb.njit(parallel=True, **njit_kwargs)
    def euler_numba(x, B, Sig, dW, Sig0, dW0, dt):
        """``x + B dt + Sig dW + Sig0 dW0`` for ``x: (W, M, n)``, ``dW0: (W, d)``."""
        W, M, n = x.shape
        d = dW.shape[2]
        out = np.empty_like(x)
        for w in nb.prange(W):
            for m in range(M):
                for i in range(n):
                    acc = x[w, m, i] + B[w, m, i] * dt
                    for q in range(d):
                        acc += Sig[w, m, i, q] * dW[w, m, q] + Sig0[w, m, i, q] * dW0[w, q]
                    out[w, m, i] = acc
        return out
else:  # pragma: no cover
    gram_numba = gram_numpy
    centered_gram_numba = centered_gram_numpy
    euler_numba = euler_numpy


def gram(F, T):
    F = np.ascontiguousarray(F, dtype=np.float64)
    T = np.ascontiguousarray(T, dtype=np.float64)
    if USE_NUMBA:
        return gram_numba(F, T)
    return gram_numpy(F, T)


def centered_gram(F, T, mean):
    F = np.ascontiguousarray(F, dtype=np.float64)
    T = np.ascontiguousarray(T, dtype=np.float64)
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    if USE_NUMBA:
        return centered_gram_numba(F, T, mean)
    return centered_gram_numpy(F, T, mean)


def euler(x, B, Sig, dW, Sig0, dW0, dt):
    if USE_NUMBA:
        args = [np.ascontiguousarray(np.broadcast_to(a, s), dtype=np.float64)
                for a, s in ((x, x.shape), (B, x.shape), (Sig, x.shape + (dW.shape[-1],)),
                             (dW, dW.shape), (Sig0, x.shape + (dW.shape[-1],)),
                             (dW0, dW0.shape))]
        return euler_numba(*args, float(dt))
    return euler_numpy(x, B, Sig, dW, Sig0, dW0, dt)


def set_threads(count):
    """Set numba worker threads (0 keeps the default); results do not depend on it."""
    if HAVE_NUMBA and count:
        nb.set_num_threads(min(int(count), nb.config.NUMBA_NUM_THREADS))
