"""Command-line entry point ``mfglab``.

Exit codes: 0 success, 1 configuration error, 2 solver failure or a
monotonicity violation.
"""
import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, _kernels
from .config import parse_config
from .errors import ConfigurationError, SolverError, UnsupportedError

SUBCOMMANDS = ("check-monotonicity", "solve-mfg", "solve-nplayer", "convergence",
               "oracle-riccati")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class _Run:
    """Artifact writer shared by all subcommands."""

    def __init__(self, name, cfg, out):
        self.name, self.cfg, self.out = name, cfg, out
        self.files = []
        self.header = f"# seed={cfg.seed}, config_hash={cfg.digest()}, subcommand={name}"
        os.makedirs(out, exist_ok=True)

    def csv(self, fname, columns, rows):
        path = os.path.join(self.out, fname)
        with open(path, "w", newline="") as fh:
            fh.write(self.header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(fname)
        return path

    def json(self, fname, payload):
        path = os.path.join(self.out, fname)
        head = {"seed": self.cfg.seed, "config_hash": self.cfg.digest(), "subcommand": self.name}
        with open(path, "w") as fh:
            json.dump({**head, **payload}, fh, indent=2, default=_jsonable)
            fh.write("\n")
        self.files.append(fname)
        return path

    def manifest(self, status, wall, extra=None):
        self.json("manifest.json", {"version": __version__, "status": status,
                                    "wall_time_s": round(wall, 3), "config": self.cfg.to_dict(),
                                    "config_source": self.cfg.source,
                                    "artifacts": list(self.files), **(extra or {})})


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _bundle(cfg, paths, worlds):
    from .noise import sample_noise
    return sample_noise(cfg.grid(), paths, cfg.lq().d if cfg.model["type"] == "lq" else 1,
                        cfg.initial_law(), cfg.seed, worlds=worlds)


def _group_violations(violations):
    """``[(name, node)]`` -> one line per condition with its failing node range."""
    nodes = {}
    for name, k in violations:
        nodes.setdefault(name, []).append(k)
    out = []
    for name, ks in nodes.items():
        ks = sorted(ks)
        if ks == [-1]:
            out.append(name)
        elif len(ks) == 1:
            out.append(f"{name} (node {ks[0]})")
        else:
            out.append(f"{name} (nodes {ks[0]}..{ks[-1]}, {len(ks)} total)")
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_check_monotonicity(cfg, run):
    from .model import lq_coefficients, validate_lq
    from .monotonicity import certify
    grid = cfg.grid()
    report = None
    if cfg.model["type"] == "lq":
        lq = cfg.lq()
        report = validate_lq(lq, grid)
        coeffs = lq_coefficients(lq, grid, require_valid=False)
        tl = lq.table_length()
    else:
        coeffs, tl = cfg.coefficients(), None
    mono = cfg["monotonicity"]
    res = certify(coeffs, int(mono["trials"]), int(mono["atoms_per_cloud"]) or None, cfg.seed,
                  nodes=range(tl) if tl else (0,))
    lam = report.lam if report is not None else float("nan")
    run.csv("monotonicity.csv",
            ["trials", "estimated_CH", "estimated_CG", "lambda", "lq_valid", "passed"],
            [[res.trials, res.estimated_CH, res.estimated_CG, lam,
              report.passed if report is not None else "", res.passed]])
    print(f"{res.verdict()}: C_H={res.estimated_CH + 0.0:.6g} C_G={res.estimated_CG + 0.0:.6g} "
          f"lambda={lam:.6g}")
    ok = res.passed and (report is None or report.passed)
    if not ok:
        wd, wt = res.witness["drift"], res.witness["terminal"]
        run.json("witness.json", {
            "violations": _group_violations(report.violations) if report else [],
            "drift": {"t": wd["t"], "trial": wd["trial"], "family": wd["family"],
                      "margin": res.estimated_CH,
                      "cloud": [c.flat() for c in wd["cloud"]]},
            "terminal": {"trial": wt["trial"], "family": wt["family"],
                         "margin": res.estimated_CG, "cloud": list(wt["cloud"])}})
        return 2, {"verdict": res.verdict()}
    return 0, {"verdict": res.verdict()}


def cmd_solve_mfg(cfg, run):
    from .mkv import solve
    coeffs = cfg.coefficients()
    mc = cfg["monte_carlo"]
    config = cfg.mkv_config()
    bundle = _bundle(cfg, int(mc["particles"]), int(mc["worlds"]))
    status = 0
    try:
        sol = solve(coeffs, config, bundle, keep=1)
    except SolverError as err:
        hist = getattr(err, "residual_history", []) or []
        run.csv("residuals.csv", ["iteration", "residual"],
                [[i + 1, r] for i, r in enumerate(hist)])
        print(f"solver failure: {err}", file=sys.stderr)
        return 2, {"error": str(err)}
    run.csv("residuals.csv", ["iteration", "residual"],
            [[i + 1, r] for i, r in enumerate(sol.residual_history)])
    s, grid = sol.summary, sol.grid
    run.csv("summary.csv", ["step", "t", "mean_X", "var_X", "mean_Y", "mean_alpha", "var_alpha"],
            [[k, grid.t(k), s["mean_X"][k, 0], s["var_X"][k, 0], s["mean_Y"][k, 0],
              s["mean_alpha"][k, 0], s["var_alpha"][k, 0]] for k in range(grid.K + 1)])
    if not sol.converged:
        status = 2
        print("solver failure: Picard iteration did not reach the tolerance", file=sys.stderr)
    else:
        print(f"converged in {len(sol.residual_history)} sweeps; "
              f"residual {sol.residual_history[-1]:.3g}; E[Y_0]={s['mean_Y'][0, 0]:.6g}")
    return status, {"converged": sol.converged, "sweeps": len(sol.residual_history)}


def cmd_solve_nplayer(cfg, run):
    from .noise import restrict_players
    from .nplayer import ne_picard_solve
    coeffs = cfg.coefficients()
    Ns = sorted(set(cfg["experiment"]["N"]))
    R = int(cfg["monte_carlo"]["repetitions"])
    necfg = cfg.ne_config()
    bundle = _bundle(cfg, max(Ns), R)
    hist_rows, summary, status, err_msg = [], [], 0, None
    for N in Ns:
        try:
            sol = ne_picard_solve(coeffs, necfg, restrict_players(bundle, N))
        except SolverError as err:
            hist = getattr(err, "residual_history", None) or []
            hist_rows += [[N, i + 1, r] for i, r in enumerate(hist)]
            status, err_msg = 2, f"N={N}: {err}"
            break
        hist_rows += [[N, i + 1, r] for i, r in enumerate(sol.residual_history)]
        summary.append([N, sol.converged, len(sol.residual_history), sol.foc_residual_max,
                        float(sol.X[-1].mean()), float(sol.alpha[0].mean()),
                        float(np.mean(np.sum(sol.zeta ** 2, axis=-1)) * sol.grid.T)])
        print(f"N={N}: converged={sol.converged} sweeps={len(sol.residual_history)} "
              f"foc={sol.foc_residual_max:.3g}")
        if not sol.converged:
            status = 2
    run.csv("residuals.csv", ["N", "iteration", "residual"], hist_rows)
    run.csv("nplayer_summary.csv", ["N", "converged", "sweeps", "foc_residual_max", "mean_X_T",
                                    "mean_alpha_0", "zeta_energy"], summary)
    if err_msg:
        print(f"solver failure: {err_msg}", file=sys.stderr)
    return status, {}


def cmd_convergence(cfg, run):
    from .harness import build_coupled_copies, gap_metrics, rate_fit
    from .noise import restrict_players
    from .nplayer import ne_picard_solve
    coeffs = cfg.coefficients()
    Ns = sorted(set(cfg["experiment"]["N"]))
    mc = cfg["monte_carlo"]
    R, M = int(mc["repetitions"]), int(mc["M_aux"])
    bundle = _bundle(cfg, M, R)
    copies = build_coupled_copies(coeffs, cfg.mkv_config(worlds=R, particles=M), bundle, Ns)
    if not copies.solution.converged:
        print("solver failure: mean-field solve did not converge", file=sys.stderr)
        return 2, {}
    reports, status = [], 0
    for N in Ns:
        ne = ne_picard_solve(coeffs, cfg.ne_config(), restrict_players(bundle, N))
        if not ne.converged:
            status = 2
        reports.append(gap_metrics(copies, ne, cfg.grid()))
        r = reports[-1]
        print(f"N={N}: state_gap={r.state_gap:.6g} control_gap={r.control_gap:.6g}")
    run.csv("rates.csv", ["N", "state_gap", "control_gap", "EB", "ESigma", "ESigma0", "EF", "EG"],
            [[r.N, r.state_gap, r.control_gap] + [r.diagnostics[k] for k in
                                                   ("EB", "ESigma", "ESigma0", "EF", "EG")]
             for r in reports])
    fits = []
    if len(Ns) >= 3:
        for which in ("state", "control"):
            f = rate_fit(reports, which)
            fits.append([which + "_gap", f.slope, f.intercept, f.r2])
            print(f"{which}_gap: slope={f.slope:.4f} r2={f.r2:.4f}")
    run.csv("rate_fit.csv", ["gap", "slope", "intercept", "r2"], fits)
    if status:
        print("solver failure: an N-player solve did not converge", file=sys.stderr)
    return status, {}


def cmd_oracle_riccati(cfg, run):
    from .harness import riccati_oracle
    grid = cfg.grid()
    sol = riccati_oracle(cfg.lq(), grid)
    x0 = np.atleast_1d(np.asarray(cfg["initial"]["mean"], dtype=float))
    n = sol.K.shape[-1]
    l = sol.gain.shape[1]
    cols = ["k", "t"] + [f"K_{i}{j}" for i in range(n) for j in range(n)] + \
        [f"gain_{i}{j}" for i in range(l) for j in range(n)]
    rows = []
    for k in range(grid.K + 1):
        gk = sol.gain[k].ravel() if k < grid.K else np.full(l * n, np.nan)
        rows.append([k, grid.t(k), *sol.K[k].ravel(), *gk])
    run.csv("riccati.csv", cols, rows)
    print("K0 =", np.array2string(sol.K0, precision=10))
    print(f"value = {sol.value(x0):.12g}")
    return 0, {"K0": sol.K0, "value": sol.value(x0)}


COMMANDS = {
    "check-monotonicity": cmd_check_monotonicity,
    "solve-mfg": cmd_solve_mfg,
    "solve-nplayer": cmd_solve_nplayer,
    "convergence": cmd_convergence,
    "oracle-riccati": cmd_oracle_riccati,
}


def build_parser():
    p = argparse.ArgumentParser(prog="mfglab", description="Mean-field game solvers and "
                                "N-player convergence experiments.")
    p.add_argument("--version", action="version", version=f"mfglab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        sp.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        sp.add_argument("--threads", type=int, default=0, help="worker threads, 0 = auto")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigurationError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        if args.threads < 0:
            raise ConfigurationError("--threads must be >= 0")
        _kernels.set_threads(args.threads)
        run = _Run(args.command, cfg, args.out or cfg["output"]["dir"])
        status, extra = COMMANDS[args.command](cfg, run)
    except (ConfigurationError, UnsupportedError) as err:
        for line in getattr(err, "violations", None) or [str(err)]:
            print(f"config error: {line}", file=sys.stderr)
        return 1
    except SolverError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 2
    run.manifest("ok" if status == 0 else "failed", time.perf_counter() - t0, extra)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
