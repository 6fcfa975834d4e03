"""Penalized HUM null-controls via conjugate gradient on the Gramian.

The Gramian maps adjoint terminal data to the terminal state reachable
from zero with the control read off the adjoint trajectory:

    ks channel        h_m = chi_w * sigma(t_m)
    elliptic channel  h_m = chi_w * psi(t_{m+1})
    eps system        h_m = chi_w * psi(t_m)

These slots are exactly the transposes of the control-to-state maps of
the forward steppers, so the Gramian is symmetric nonnegative in the
discrete terminal pairing and plain CG applies. The penalized normal
equations (Lambda + penalty*I) sigma_T = -free_terminal give the control
whose terminal state is exactly -penalty * sigma_T.

The measured control-cost law is exposed by cost_sweep: least squares of
log(cost) against 1/T, slope reported as fit_K.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlWindow, System, SystemParams, uniform_dts
from .errors import CGError
from .operators import NegNormRealizer, l2_inner

@dataclass(frozen=True)
class HumConfig:
    penalty: float = 1e-10
    cg_tol: float = 1e-8
    cg_maxit: int = 500
    window: ControlWindow | None = None

    def __post_init__(self):
        if not self.penalty > 0:
            raise ValueError("penalty must be positive")
        if not (0.0 < self.cg_tol < 1.0):
            raise ValueError("cg_tol must lie in (0,1)")
        if self.cg_maxit < 1:
            raise ValueError("cg_maxit must be >= 1")


@dataclass
class ControlResult:
    h: np.ndarray                  # (M, n), masked by chi_w
    cost: float                    # discrete L^2((0,T) x omega) norm
    terminal_u_norm: float         # H^-2 surrogate of u(T)
    terminal_v_norm: float         # H^-2 surrogate of v(T)
    v_tail_max: float              # max of |v(t)|_{-2} over the last 10% of steps
    cg_iterations: int
    cg_residual: float
    trajectory: object = None      # controlled Trajectory
    dual_value: float = 0.0        # -J(sigma_T*) of the penalized functional
    sigmaT: np.ndarray | None = None


@dataclass
class CostCurve:
    horizons: list
    costs: list
    fit_K: float
    fit_offset: float
    r_squared: float
    failed: list = field(default_factory=list)


def _conjugate_gradient(apply_op, rhs, inner, tol, maxit):
    """Plain CG in the supplied inner product; relative-residual stopping.

    Raises CGError when the iteration cap is hit, reporting the final
    relative residual, or when the residual stalls at the noise floor.
    """
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = inner(r, r)
    rr0 = rr
    if rr0 == 0.0:
        return x, 0, 0.0
    for it in range(1, maxit + 1):
        Ap = apply_op(p)
        pAp = inner(p, Ap)
        if pAp <= 0 or not np.isfinite(pAp):
            raise CGError(
                f"CG curvature breakdown at iteration {it} (pAp={pAp:.3e})",
                iterations=it, residual=float(np.sqrt(rr / rr0)),
            )
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = inner(r, r)
        if rr_new <= tol**2 * rr0:
            return x, it, float(np.sqrt(rr_new / rr0))
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise CGError(
        f"CG hit iteration cap {maxit} at relative residual {np.sqrt(rr / rr0):.3e}",
        iterations=maxit, residual=float(np.sqrt(rr / rr0)),
    )


def _observe(system, adj_traj, nst):
    """Control samples read off an adjoint trajectory (transpose slots)."""
    chi = system.chi
    if system.window.target_equation == "ks":
        return chi * adj_traj.u[:nst]
    return chi * adj_traj.v[1:nst + 1]


def gramian_apply(system, sigmaT, dts):
    """Terminal state reached from zero with the control observed from sigmaT."""
    nst = len(dts)
    adj = system.adjoint(sigmaT, dts=dts)
    h = _observe(system, adj, nst)
    out = system.forward_linear(np.zeros(system.n), h, dts=dts)
    return out.u[-1], h


def control_cost(grid, window, dts, h):
    chi = window.indicator(grid)
    hw = chi * h
    return float(np.sqrt(np.sum(dts[:, None] * grid.h * hw**2)))


def compute_null_control(u0, params, ops, window, T, M, cfg, realizer=None, dts=None):
    """Penalized HUM control for the elliptic-limit linear system."""
    system = System(params, ops, window)
    dts = uniform_dts(T, M) if dts is None else np.asarray(dts, dtype=float)
    nst = len(dts)
    grid = ops.grid
    realizer = realizer or NegNormRealizer.from_operators(ops)

    free = system.forward_linear(u0, dts=dts)
    yT = free.u[-1]

    inner = lambda x, y: l2_inner(grid, x, y)
    beta = cfg.penalty

    if inner(yT, yT) == 0.0:
        h = np.zeros((nst, system.n))
        traj = free
        sigmaT = np.zeros(system.n)
        it, res = 0, 0.0
    else:
        def op(s):
            return gramian_apply(system, s, dts)[0] + beta * s

        sigmaT, it, res = _conjugate_gradient(op, -yT, inner, cfg.cg_tol, cfg.cg_maxit)
        adj = system.adjoint(sigmaT, dts=dts)
        h = _observe(system, adj, nst)
        traj = system.forward_linear(u0, h, dts=dts)

    uT = traj.u[-1]
    cost = control_cost(grid, window, dts, h)
    tail = max(1, nst // 10)
    v_tail = max(realizer.neg_norm(traj.v[m], -2) for m in range(nst + 1 - tail, nst + 1))
    dual = 0.5 * (inner(gramian_apply(system, sigmaT, dts)[0], sigmaT)
                  + beta * inner(sigmaT, sigmaT)) if it else 0.0
    return ControlResult(
        h=h,
        cost=cost,
        terminal_u_norm=realizer.neg_norm(uT, -2),
        terminal_v_norm=realizer.neg_norm(traj.v[-1], -2),
        v_tail_max=v_tail,
        cg_iterations=it,
        cg_residual=res,
        trajectory=traj,
        dual_value=dual,
        sigmaT=sigmaT,
    )


def gramian_apply_eps(system, sigmaT, psiT, dts):
    """Two-parabolic Gramian: (sigma_T, psi_T) -> (u(T), v(T)) from zero data."""
    nst = len(dts)
    adj = system.adjoint_eps(sigmaT, psiT, dts=dts)
    h = system.chi * adj.v[:nst]
    out = system.forward_eps(np.zeros(system.n), np.zeros(system.n), h, dts=dts)
    return out.u[-1], out.v[-1], h


def compute_null_control_eps(u0, v0, params, ops, window, T, M, cfg, realizer=None, dts=None):
    """Penalized HUM on the two-parabolic system.

    Terminal pairing <u(T), sigma_T> + eps <v(T), psi_T>; the penalty acts
    in the same weighted pairing, so the controlled terminal pair is
    exactly -penalty * (sigma_T*, psi_T*).
    """
    if params.is_elliptic:
        raise ValueError("compute_null_control_eps needs numeric eps")
    if window.target_equation != "elliptic":
        raise ValueError("the eps system is controlled through the heat equation")
    eps = float(params.eps)
    system = System(params, ops, window)
    dts = uniform_dts(T, M) if dts is None else np.asarray(dts, dtype=float)
    nst = len(dts)
    grid = ops.grid
    n = system.n
    realizer = realizer or NegNormRealizer.from_operators(ops)

    free = system.forward_eps(u0, v0, dts=dts)
    yT = np.concatenate([free.u[-1], free.v[-1]])

    def inner(z, w):
        return l2_inner(grid, z[:n], w[:n]) + eps * l2_inner(grid, z[n:], w[n:])

    beta = cfg.penalty

    if inner(yT, yT) == 0.0:
        h = np.zeros((nst, n))
        traj = free
        it, res = 0, 0.0
    else:
        def op(z):
            uT, vT, _ = gramian_apply_eps(system, z[:n], z[n:], dts)
            return np.concatenate([uT, vT]) + beta * z

        z, it, res = _conjugate_gradient(op, -yT, inner, cfg.cg_tol, cfg.cg_maxit)
        adj = system.adjoint_eps(z[:n], z[n:], dts=dts)
        h = system.chi * adj.v[:nst]
        traj = system.forward_eps(u0, v0, h, dts=dts)

    cost = control_cost(grid, window, dts, h)
    tail = max(1, nst // 10)
    v_tail = max(realizer.neg_norm(traj.v[m], -2) for m in range(nst + 1 - tail, nst + 1))
    return ControlResult(
        h=h,
        cost=cost,
        terminal_u_norm=realizer.neg_norm(traj.u[-1], -2),
        terminal_v_norm=realizer.neg_norm(traj.v[-1], -2),
        v_tail_max=v_tail,
        cg_iterations=it,
        cg_residual=res,
        trajectory=traj,
    )


def fit_cost_law(horizons, costs):
    """Least squares of log(cost) on 1/T; returns (slope K, offset, R^2)."""
    invT = 1.0 / np.asarray(horizons, dtype=float)
    logc = np.log(np.asarray(costs, dtype=float))
    design = np.vstack([invT, np.ones_like(invT)]).T
    coef, *_ = np.linalg.lstsq(design, logc, rcond=None)
    predicted = design @ coef
    ss_res = float(np.sum((logc - predicted) ** 2))
    ss_tot = float(np.sum((logc - logc.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def cost_sweep(u0, params, ops, window, horizons, steps_per_unit, cfg, realizer=None):
    """Run compute_null_control per horizon and fit the e^{K/T} law.

    Horizons must be strictly decreasing in (0, 2]. CG failures are
    recorded per horizon and skipped; the fit needs at least two
    surviving points (callers enforce stronger preconditions).
    """
    horizons = list(horizons)
    if any(not (0.0 < t <= 2.0) for t in horizons):
        raise ValueError("horizons must lie in (0, 2]")
    if any(horizons[i] <= horizons[i + 1] for i in range(len(horizons) - 1)):
        raise ValueError("horizons must be strictly decreasing")
    realizer = realizer or NegNormRealizer.from_operators(ops)

    costs, kept, failed = [], [], []
    results = []
    for T in horizons:
        M = max(16, int(round(steps_per_unit * T)))
        try:
            res = compute_null_control(u0, params, ops, window, T, M, cfg, realizer)
        except CGError as exc:
            failed.append({"T": T, "reason": str(exc)})
            continue
        costs.append(res.cost)
        kept.append(T)
        results.append(res)

    if len(kept) < 2:
        raise CGError(f"cost sweep kept {len(kept)} horizons; cannot fit")
    fit_K, offset, r2 = fit_cost_law(kept, costs)
    return CostCurve(horizons=kept, costs=costs, fit_K=fit_K,
                     fit_offset=offset, r_squared=r2, failed=failed), results
