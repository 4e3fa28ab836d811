"""Compare the numba kernels with their numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--rows 1000000] [--repeat 5] [--solve]

Each kernel is timed on the same inputs through both code paths (best of
``--repeat`` runs, after one warm-up call that absorbs JIT compilation) and
the maximum absolute difference of the outputs is reported.  ``--solve``
additionally times a small particle solve end-to-end in two subprocesses,
one with ``MFGLAB_NUMBA=0``.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mfglab import _kernels as kern

SOLVE_SNIPPET = """
import time
from mfglab.model import LQCoefficients, lq_coefficients
from mfglab.mkv import MkvConfig, picard_solve
from mfglab.noise import InitialLaw, make_time_grid, sample_noise
g = make_time_grid(1.0, 50)
lq = LQCoefficients.build(A=0.2, B=1, C=0.1, D=0.1, C0=0.1, D0=0.1, Q=1, Qbar=1, P=1,
                          Pbar=0.5, c1=1, c2=0.5)
b = sample_noise(g, 4096, 1, InitialLaw.gaussian([1.0], [[0.25]]), 7, worlds=32)
c = lq_coefficients(lq, g)
picard_solve(c, MkvConfig(g, 4, 64, max_picard=2), b)   # warm-up / JIT
t = time.perf_counter()
sol = picard_solve(c, MkvConfig(g, 32, 4096, damping=0.8), b)
print(time.perf_counter() - t, len(sol.residual_history), sol.summary["mean_Y"][0, 0])
"""


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b)))


def kernel_cases(rows, rng):
    F = rng.standard_normal((rows, 3))
    T = rng.standard_normal((rows, 3))
    mean = F.mean(axis=0)
    W, M = 64, max(1, rows // 64)
    x = rng.standard_normal((W, M, 1))
    B = rng.standard_normal((W, M, 1))
    S = rng.standard_normal((W, M, 1, 1))
    dW = rng.standard_normal((W, M, 1))
    S0 = rng.standard_normal((W, M, 1, 1))
    dW0 = rng.standard_normal((W, 1))
    return [
        ("gram", (F, T), kern.gram_numpy, kern.gram_numba),
        ("centered_gram", (F, T, mean), kern.centered_gram_numpy, kern.centered_gram_numba),
        ("euler", (x, B, S, dW, S0, dW0, 0.01), kern.euler_numpy, kern.euler_numba),
    ]


def run_solve(flag):
    env = dict(os.environ, MFGLAB_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SOLVE_SNIPPET], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return float(out[0]), int(out[1]), float(out[2])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--solve", action="store_true", help="also time an end-to-end solve")
    args = ap.parse_args(argv)
    if not kern.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"rows={args.rows}  threads={kern.nb.get_num_threads()}")
    print(f"{'kernel':<15}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, inputs, f_np, f_nb in kernel_cases(args.rows, rng):
        t_np = best_of(lambda: f_np(*inputs), args.repeat)
        t_nb = best_of(lambda: f_nb(*inputs), args.repeat)
        diff = max_diff(f_np(*inputs), f_nb(*inputs))
        print(f"{name:<15}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.2f}{diff:>12.2e}")
    if args.solve:
        print("\nend-to-end particle solve (32 worlds x 4096 particles, K=50)")
        for flag in ("0", "1"):
            t, sweeps, y0 = run_solve(flag)
            label = "numba" if flag == "1" else "numpy"
            print(f"  {label}: {t:7.2f} s  sweeps={sweeps}  E[Y_0]={y0:.12f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
