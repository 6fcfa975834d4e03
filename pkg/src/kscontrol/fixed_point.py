"""Banach fixed-point loop producing a local null-control for uu_x.

The map iterated is f |-> -F(u_f), where u_f is the glued trajectory of
the source-term construction driven by f and F is the conservative
discrete transport term. At the fixed point the assembled linear
trajectory solves the nonlinear scheme exactly, so the final control is
replayed through the nonlinear stepper and the true terminal norms are
reported.

Distances between iterates are measured in the rho_F-weighted H^-2
surrogate on the composite step grid, the discrete stand-in for the
paper-grade weighted dual norm; contraction ratios are recorded from the
second step on.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import System, apply_F
from .errors import NonContractionError
from .operators import NegNormRealizer
from .source_term import assemble_source_term_control, composite_step_grid


@dataclass(frozen=True)
class FixedPointConfig:
    ws: object                 # WeightSchedule
    tg: object                 # TimeGrid
    hum: object                # HumConfig used on every slice
    M: int = 64                # nominal step budget over the whole horizon
    radius_R: float = 1e-2     # admission ball for |u0|_{-1}
    tol: float = 1e-10         # stop when the weighted iterate distance drops below
    max_iter: int = 12

    def __post_init__(self):
        if not (self.radius_R > 0 and self.tol > 0 and self.max_iter >= 1):
            raise ValueError("need radius_R > 0, tol > 0, max_iter >= 1")
        if self.ws is None or self.tg is None or self.hum is None:
            raise ValueError("FixedPointConfig needs ws, tg and hum")
        if self.M < 1:
            raise ValueError("M must be >= 1")


@dataclass
class FixedPointResult:
    f_star: np.ndarray
    control: object                  # PiecewiseControl of the final assembly
    assembly: object                 # full AssemblyResult
    iterates: list                   # weighted distances |f_{n+1} - f_n|
    contraction_estimates: list      # ratios, recorded from iteration 2 on
    f_norms: list                    # weighted |f_n| per iteration
    terminal_u_norm: float           # nonlinear replay |u(T)|_{-1}
    terminal_v_norm: float           # nonlinear replay |v(T)|_{-1}
    converged: bool
    n_iterations: int


def weighted_f_distance(delta_f, lefts, dts, ws, realizer, t_cut):
    """rho_F-weighted H^-2 distance of source samples up to t_cut."""
    acc = 0.0
    for j, t in enumerate(lefts):
        if t > t_cut:
            break
        r = ws.rhoF(t)
        if r > 0:
            acc += dts[j] * (realizer.neg_norm(delta_f[j], -2) / r) ** 2
    return float(np.sqrt(acc))


def lambda_map(f, u0, params, ops, window, cfg, realizer=None):
    """One application of the fixed-point map: assemble, then -F(u)."""
    realizer = realizer or NegNormRealizer.from_operators(ops)
    res = assemble_source_term_control(u0, f, params, ops, window,
                                       cfg.ws, cfg.tg, cfg.M, cfg.hum, realizer)
    fnew = np.array([-apply_F(ops, uu) for uu in res.trajectory.u[:-1]])
    return fnew, res


def solve_nonlinear_control(u0, params, ops, window, cfg, realizer=None, f0=None):
    """Iterate f <- -F(u_f) from f0 (default 0) and replay nonlinearly.

    Raises NonContractionError when the measured ratio stays >= 1 for
    three consecutive steps; the suggestion is to shrink the initial
    data, since the quadratic map contracts only on a small ball.
    """
    realizer = realizer or NegNormRealizer.from_operators(ops)
    grid = ops.grid
    n = grid.n_interior
    u0 = np.asarray(u0, dtype=float)
    u0_norm = realizer.neg_norm(u0, -1)
    if u0_norm > cfg.radius_R:
        raise NonContractionError(
            f"|u0|_-1 = {u0_norm:.3e} exceeds the admission radius "
            f"{cfg.radius_R:.3e}; shrink the initial data"
        )

    lefts, dts = composite_step_grid(cfg.tg, cfg.M)
    total = len(dts)
    f_cur = np.zeros((total, n)) if f0 is None else np.asarray(f0, dtype=float).copy()

    distances = []
    ratios = []
    f_norms = []
    assembly = None
    converged = False
    bad_streak = 0
    n_iter = 0

    for it in range(1, cfg.max_iter + 1):
        n_iter = it
        f_next, assembly = lambda_map(f_cur, u0, params, ops, window, cfg, realizer)
        t_cut = (list(cfg.tg.points) + [cfg.tg.T])[assembly.k_stop]
        d = weighted_f_distance(f_next - f_cur, lefts, dts, cfg.ws, realizer, t_cut)
        distances.append(d)
        f_norms.append(weighted_f_distance(f_next, lefts, dts, cfg.ws, realizer, t_cut))
        if len(distances) >= 2 and distances[-2] > 0:
            ratio = distances[-1] / distances[-2]
            ratios.append(ratio)
            if ratio >= 1.0:
                bad_streak += 1
                if bad_streak >= 3:
                    raise NonContractionError(
                        f"iterate distances grew for 3 consecutive steps "
                        f"(last ratio {ratio:.3f}); shrink |u0| below "
                        f"{u0_norm / 2:.3e} and retry"
                    )
            else:
                bad_streak = 0
        f_cur = f_next
        if d <= cfg.tol:
            converged = True
            break

    # final assembly with the converged source, then nonlinear replay
    f_next, assembly = lambda_map(f_cur, u0, params, ops, window, cfg, realizer)
    system = System(params, ops, window)
    h_full = assembly.control.concatenated(total, n)
    replay = system.forward_nonlinear(u0, h_full, dts=dts)

    return FixedPointResult(
        f_star=f_cur,
        control=assembly.control,
        assembly=assembly,
        iterates=distances,
        contraction_estimates=ratios,
        f_norms=f_norms,
        terminal_u_norm=realizer.neg_norm(replay.u[-1], -1),
        terminal_v_norm=realizer.neg_norm(replay.v[-1], -1),
        converged=converged,
        n_iterations=n_iter,
    )
