"""Experiment runner: every workflow as a subcommand over a JSON config.

Outputs are headered CSV (UTF-8, LF, 17 significant digits) plus JSON
metric files; every run ends by writing manifest.json listing the other
artifacts with their sha256 checksums. All randomness flows through one
seeded PCG64 generator, so identical config + seed reproduces the data
artifacts byte for byte (the manifest carries the wall clock and is the
one deliberately volatile file).

Exit codes: 0 ok, 2 invalid config, 3 solver divergence / non-coercive
elliptic operator, 4 conjugate-gradient failure, 5 non-contraction.
"""

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .carleman import build_nu, build_weights, eval_functionals
from .config import NONLINEAR_MODELS, load_config
from .dynamics import System, SystemParams, uniform_dts
from .errors import (CGError, ConfigError, DivergenceError,
                     NonCoerciveError, NonContractionError)
from .fixed_point import FixedPointConfig, solve_nonlinear_control
from .hum import (HumConfig, compute_null_control, compute_null_control_eps,
                  cost_sweep, fit_cost_law)
from .operators import NegNormRealizer, build_grid, build_operators, l2_norm
from .source_term import composite_step_grid, default_p, make_time_grid, make_weights

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_CG = 4
EXIT_CONTRACTION = 5


# -- artifact writers -------------------------------------------------------

def format_float(x):
    return f"{float(x):.17g}"


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_float(v) if isinstance(v, (int, float, np.floating))
                              and not isinstance(v, bool) else str(v)
                              for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def sha256_of(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def write_manifest(outdir, command, cfg, files, started):
    manifest = {
        "command": command,
        "config": cfg.raw,
        "versions": {
            "kscontrol": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "rng": {"generator": "pcg64", "seed": cfg.seed},
        "wall_clock_s": time.time() - started,
        "outputs": [{"path": f.name, "sha256": sha256_of(f)} for f in files],
    }
    write_json(outdir / "manifest.json", manifest)


# -- shared setup -----------------------------------------------------------

class Run:
    """Grid, operators, realizer, seeded rng and realized initial data."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.ops = build_operators(build_grid(cfg.n_interior))
        self.grid = self.ops.grid
        self.realizer = NegNormRealizer.from_operators(self.ops)
        self.rng = np.random.default_rng(cfg.seed)
        # consumption order is part of the reproducibility contract: u0, v0
        self.u0 = cfg.u0.realize(self.grid, self.rng, self.realizer)
        self.v0 = (cfg.v0.realize(self.grid, self.rng, self.realizer)
                   if cfg.v0 is not None else None)

    def hum_config(self):
        return HumConfig(penalty=self.cfg.hum_penalty, cg_tol=self.cfg.hum_cg_tol,
                         cg_maxit=self.cfg.hum_cg_maxit, window=self.cfg.window)

    def weight_constant(self):
        """K for the source-term weights: configured value or fitted slope."""
        cfg = self.cfg
        if cfg.st_K != "fit":
            return float(cfg.st_K), "configured"
        # fit on the first four slice lengths of the geometric grid, the
        # horizons the piecewise construction actually uses
        q = cfg.st_q
        gaps = [cfg.horizon * (q - 1) / q ** (k + 1) for k in range(4)]
        spu = max(1, int(round(cfg.n_steps / cfg.horizon)))
        curve, _ = cost_sweep(self.u0, cfg.params, self.ops, cfg.window, gaps,
                              spu, self.hum_config(), self.realizer)
        return max(curve.fit_K, 1e-3), "fit"

    def schedule(self):
        cfg = self.cfg
        K, K_origin = self.weight_constant()
        p = cfg.st_p if cfg.st_p is not None else default_p(cfg.st_q)
        ws = make_weights(p, cfg.st_q, K, cfg.horizon)
        tg = make_time_grid(cfg.horizon, cfg.st_q, cfg.st_k_max)
        return ws, tg, K, K_origin


# -- subcommands ------------------------------------------------------------

def cmd_simulate(cfg, outdir, quiet):
    run = Run(cfg)
    sys_ = System(cfg.params, run.ops, cfg.window)
    T, M = cfg.horizon, cfg.n_steps
    if cfg.model == "eps-parabolic":
        traj = sys_.forward_eps(run.u0, run.v0, T=T, M=M)
    elif cfg.model in NONLINEAR_MODELS:
        traj = sys_.forward_nonlinear(run.u0, T=T, M=M)
    else:
        traj = sys_.forward_linear(run.u0, T=T, M=M)

    rows = []
    for m, t in enumerate(traj.times):
        for i, x in enumerate(run.grid.nodes):
            rows.append((t, x, traj.u[m, i], traj.v[m, i]))
    path = outdir / "trajectory.csv"
    write_csv(path, ("t", "x", "u", "v"), rows)
    if not quiet:
        print(f"wrote {path} ({len(rows)} rows)")
    return [path]


def _control_csv_rows(grid, window, lefts, h):
    chi = window.indicator(grid).astype(bool)
    rows = []
    for m, t in enumerate(lefts):
        for i in np.nonzero(chi)[0]:
            rows.append((t, grid.nodes[i], h[m, i]))
    return rows


def cmd_control(cfg, outdir, quiet):
    run = Run(cfg)
    T, M = cfg.horizon, cfg.n_steps
    hum = run.hum_config()
    files = []
    metrics = {
        "model": cfg.model,
        "initial_u_norm_neg1": run.realizer.neg_norm(run.u0, -1),
        "initial_u_norm_neg2": run.realizer.neg_norm(run.u0, -2),
        "penalty": cfg.hum_penalty,
    }

    if cfg.model in ("linear-ks-control", "linear-elliptic-control"):
        res = compute_null_control(run.u0, cfg.params, run.ops, cfg.window,
                                   T, M, hum, run.realizer)
        lefts = np.concatenate([[0.0], np.cumsum(uniform_dts(T, M)[:-1])])
        h = res.h
        metrics.update(cost=res.cost, terminal_u_norm=res.terminal_u_norm,
                       terminal_v_norm=res.terminal_v_norm,
                       v_tail_max=res.v_tail_max,
                       cg_iterations=res.cg_iterations,
                       cg_residual=res.cg_residual)
    elif cfg.model == "eps-parabolic":
        res = compute_null_control_eps(run.u0, run.v0, cfg.params, run.ops,
                                       cfg.window, T, M, hum, run.realizer)
        lefts = np.concatenate([[0.0], np.cumsum(uniform_dts(T, M)[:-1])])
        h = res.h
        metrics.update(cost=res.cost, terminal_u_norm=res.terminal_u_norm,
                       terminal_v_norm=res.terminal_v_norm,
                       v_tail_max=res.v_tail_max,
                       cg_iterations=res.cg_iterations,
                       cg_residual=res.cg_residual,
                       initial_v_norm_neg1=run.realizer.neg_norm(run.v0, -1),
                       eps=float(cfg.params.eps))
    else:  # nonlinear models
        ws, tg, K, K_origin = run.schedule()
        fp = FixedPointConfig(ws=ws, tg=tg, hum=hum, M=M,
                              radius_R=cfg.fp_radius, tol=cfg.fp_tol,
                              max_iter=cfg.fp_max_iter)
        res = solve_nonlinear_control(run.u0, cfg.params, run.ops, cfg.window,
                                      fp, run.realizer)
        lefts, dts = composite_step_grid(tg, M)
        h = res.control.concatenated(len(dts), run.grid.n_interior)
        chi = cfg.window.indicator(run.grid)
        cost = float(np.sqrt(np.sum(dts[:, None] * run.grid.h * (chi * h) ** 2)))
        metrics.update(cost=cost, terminal_u_norm=res.terminal_u_norm,
                       terminal_v_norm=res.terminal_v_norm,
                       converged=res.converged,
                       n_iterations=res.n_iterations,
                       iterates=res.iterates,
                       contraction_estimates=res.contraction_estimates,
                       weight_K=K, weight_K_origin=K_origin,
                       slices_controlled=res.assembly.k_stop,
                       slice_cg_iterations=[s["cg_iterations"]
                                            for s in res.control.slices])
        cpath = outdir / "contraction.csv"
        crows = [(i + 1, d, res.contraction_estimates[i - 1] if i >= 1 else float("nan"))
                 for i, d in enumerate(res.iterates)]
        write_csv(cpath, ("iteration", "distance", "ratio"), crows)
        files.append(cpath)

    path = outdir / "control.csv"
    write_csv(path, ("t", "x", "h"), _control_csv_rows(run.grid, cfg.window, lefts, h))
    files.insert(0, path)
    mpath = outdir / "metrics.json"
    write_json(mpath, metrics)
    files.append(mpath)
    if not quiet:
        print(f"wrote {path}; cost={metrics['cost']:.6e} "
              f"terminal_u={metrics['terminal_u_norm']:.3e}")
    return files


def cmd_cost_sweep(cfg, outdir, quiet):
    if len(cfg.sweep_horizons) < 4:
        raise ConfigError("cost_sweep.horizons needs at least 4 entries for a fit")
    if cfg.model == "eps-parabolic":
        raise ConfigError("cost-sweep measures the elliptic-limit cost law; "
                          "use a linear or nonlinear model")
    run = Run(cfg)
    curve, _ = cost_sweep(run.u0, cfg.params, run.ops, cfg.window,
                          cfg.sweep_horizons, cfg.sweep_steps_per_unit,
                          run.hum_config(), run.realizer)
    if len(curve.failed) > len(cfg.sweep_horizons) / 2:
        raise CGError(f"{len(curve.failed)} of {len(cfg.sweep_horizons)} "
                      "horizons failed")
    rows = [(T, 1.0 / T, c, np.log(c))
            for T, c in zip(curve.horizons, curve.costs)]
    cpath = outdir / "cost_curve.csv"
    write_csv(cpath, ("T", "inv_T", "cost", "log_cost"), rows)
    fpath = outdir / "fit.json"
    write_json(fpath, {
        "fit_K": curve.fit_K,
        "fit_offset": curve.fit_offset,
        "r_squared": curve.r_squared,
        "n_horizons": len(curve.horizons),
        "failed": curve.failed,
    })
    if not quiet:
        print(f"fit_K={curve.fit_K:.4f} R^2={curve.r_squared:.4f}")
    return [cpath, fpath]


def cmd_eps_sweep(cfg, outdir, quiet):
    if cfg.model != "eps-parabolic":
        raise ConfigError("eps-sweep requires model eps-parabolic")
    run = Run(cfg)
    T, M = cfg.horizon, cfg.n_steps
    hum = run.hum_config()
    dts = uniform_dts(T, M)

    # the elliptic-limit control and trajectory, computed once
    limit_params = dataclasses.replace(cfg.params, eps="elliptic")
    limit = compute_null_control(run.u0, limit_params, run.ops, cfg.window,
                                 T, M, hum, run.realizer)
    limit_sys = System(limit_params, run.ops, cfg.window)
    v_lim = limit_sys.forward_linear(run.u0, limit.h, dts=dts).v[-1]

    rows = []
    for eps in cfg.eps_ladder:
        pe = dataclasses.replace(cfg.params, eps=eps)
        res = compute_null_control_eps(run.u0, run.v0, pe, run.ops, cfg.window,
                                       T, M, hum, run.realizer)
        # dynamics convergence: run the eps system with the frozen limit
        # control and compare terminal v against the limit trajectory
        eps_sys = System(pe, run.ops, cfg.window)
        v_eps = eps_sys.forward_eps(run.u0, run.v0, limit.h, dts=dts).v[-1]
        v_diff = l2_norm(run.grid, v_eps - v_lim)
        # weak-limit proxy for the controls: L2(omega) norm of the time
        # integral of the difference (a fixed weak-* functional family)
        chi = cfg.window.indicator(run.grid)
        hint = np.sum(dts[:, None] * chi * (res.h - limit.h), axis=0)
        h_weak = l2_norm(run.grid, hint)
        rows.append((eps, res.cost, v_diff, h_weak))
    path = outdir / "eps_curve.csv"
    write_csv(path, ("eps", "cost", "v_diff", "h_weak_diff"), rows)
    if not quiet:
        costs = [r[1] for r in rows]
        print(f"eps ladder costs: {', '.join(format_float(c) for c in costs)}")
    return [path]


def cmd_carleman_audit(cfg, outdir, quiet):
    run = Run(cfg)
    T, M = cfg.horizon, cfg.n_steps
    sys_ = System(cfg.params, run.ops, cfg.window)
    # inner observation set strictly inside the control window
    l1, l2 = cfg.window.omega
    shrink = 0.25 * (l2 - l1)
    nu = build_nu((l1 + shrink, l2 - shrink))
    eps = None if cfg.params.is_elliptic else float(cfg.params.eps)

    rows = []
    for mu in cfg.carleman_mu:
        s = mu * (T + T * T)
        for lam in cfg.carleman_lambda:
            w = build_weights(nu, s, lam, cfg.carleman_k, T)
            ratios = []
            for _ in range(cfg.carleman_samples):
                sigT = run.rng.standard_normal(run.grid.n_interior)
                if eps is None:
                    tr = sys_.adjoint(sigT, T=T, M=M)
                else:
                    psiT = run.rng.standard_normal(run.grid.n_interior)
                    tr = sys_.adjoint_eps(sigT, psiT, T=T, M=M)
                audit = eval_functionals(tr, w, run.ops, cfg.window, eps=eps)
                if np.isfinite(audit.ratio):  # 0/0 guard for zero data
                    ratios.append(audit.ratio)
            rows.append((mu, lam, min(ratios), float(np.median(ratios))))
    path = outdir / "audit.csv"
    write_csv(path, ("mu", "lambda", "min_ratio", "median_ratio"), rows)
    if not quiet:
        print(f"wrote {path} ({len(rows)} grid points)")
    return [path]


COMMANDS = {
    "simulate": cmd_simulate,
    "control": cmd_control,
    "cost-sweep": cmd_cost_sweep,
    "eps-sweep": cmd_eps_sweep,
    "carleman-audit": cmd_carleman_audit,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kscontrol",
        description="null-control experiments for the coupled "
                    "fourth-order-parabolic / elliptic system",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the JSON config")
        sp.add_argument("--output-dir", default=None,
                        help="overrides config.output_dir")
        sp.add_argument("--seed", type=int, default=None,
                        help="overrides config.seed")
        sp.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
            cfg.raw = {**cfg.raw, "seed": args.seed}
        outdir = Path(args.output_dir or cfg.output_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, outdir, args.quiet)
        write_manifest(outdir, args.command, cfg, files, started)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonCoerciveError, DivergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CGError as exc:
        print(f"conjugate gradient failure: {exc}", file=sys.stderr)
        return EXIT_CG
    except NonContractionError as exc:
        print(f"non-contraction: {exc}", file=sys.stderr)
        return EXIT_CONTRACTION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
