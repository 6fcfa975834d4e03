"""Piecewise control construction with exponentially decaying weights.

The horizon is sliced at T_k = T - T/q^k. On each slice the state left
over from the previous slice is steered to (numerically) zero by a HUM
control while the source acts on a parallel free evolution started from
zero; the superposition is exact for the linear stepper, so the glued
trajectory is continuous at every T_k by construction.

The weights

    rho_0(t) = exp(-p K / ((q-1)(T-t)))
    rho_F(t) = exp(-(1+p) q^2 K / ((q-1)(T-t)))

(for t >= T(1-1/q^2), frozen at their junction value to the left) tie
the admissible sources to the achievable states: rho_0^2/rho_F <= 1
whenever 1 < q < sqrt(2) and p > q^2/(2-q^2), and on the slice points
they satisfy rho_0(T_{k+2}) = rho_F(T_k) exp(K/(T_{k+2}-T_{k+1})),
an exact algebraic identity when rho_F is read through its defining
formula (the constant extension overrides that formula at T_0 and T_1,
where the identity then turns into the inequality the chaining argument
actually needs).

The exponent coefficients are rounded once from exact arithmetic so the
identity check below is meaningful at the 1e-12 level even for stiff
(p, q, K, T) combinations.
"""

from dataclasses import dataclass, field

import mpmath
import numpy as np

from .dynamics import System, Trajectory
from .errors import CGError
from .hum import compute_null_control, control_cost
from .operators import NegNormRealizer

MIN_STEPS_PER_SLICE = 8
RESTART_STOP = 1e-12  # skip controlling slices once |m_k|_{-1} falls below this


def admissible_pq(p, q):
    return 1.0 < q < np.sqrt(2.0) and p > q * q / (2.0 - q * q)


@dataclass(frozen=True)
class WeightSchedule:
    """Evaluators for rho_0 and rho_F with parameters (p, q, K, T)."""

    p: float
    q: float
    K: float
    T: float
    coef0: float = field(init=False)   # p K/(q-1)
    coefF: float = field(init=False)   # (1+p) q^2 K/(q-1)

    def __post_init__(self):
        if not admissible_pq(self.p, self.q):
            raise ValueError(
                f"(p,q)=({self.p},{self.q}) violates 1<q<sqrt(2), p>q^2/(2-q^2); "
                "the contraction chain needs rho_0^2 <= rho_F"
            )
        if not (self.K > 0 and self.T > 0):
            raise ValueError("K and T must be positive")
        with mpmath.workdps(40):
            p, q, K = mpmath.mpf(self.p), mpmath.mpf(self.q), mpmath.mpf(self.K)
            object.__setattr__(self, "coef0", float(p * K / (q - 1)))
            object.__setattr__(self, "coefF", float((1 + p) * q**2 * K / (q - 1)))

    @property
    def junction(self):
        """Left end of the region where the defining formulas apply."""
        return self.T * (1.0 - 1.0 / self.q**2)

    def _eval(self, coef, t, extended=True):
        t = np.asarray(t, dtype=float)
        te = np.maximum(t, self.junction) if extended else t
        tau = self.T - te
        with np.errstate(divide="ignore", over="ignore"):
            out = np.where(tau > 0.0, np.exp(-coef / np.where(tau > 0, tau, 1.0)), 0.0)
        return out if out.shape else float(out)

    def rho0(self, t):
        return self._eval(self.coef0, t)

    def rhoF(self, t):
        return self._eval(self.coefF, t)

    def rho0_raw(self, t):
        """Defining formula without the constant extension."""
        return self._eval(self.coef0, t, extended=False)

    def rhoF_raw(self, t):
        return self._eval(self.coefF, t, extended=False)


def make_weights(p, q, K, T):
    return WeightSchedule(p=p, q=q, K=K, T=T)


def default_p(q):
    """Smallest admissible p with a 5% safety margin."""
    return 1.05 * q * q / (2.0 - q * q)


@dataclass(frozen=True)
class TimeGrid:
    """Slice points T_k = T - T/q^k, k = 0..k_max, with exact tails T/q^k."""

    T: float
    q: float
    k_max: int
    points: np.ndarray = field(init=False)
    tails: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (1.0 < self.q < np.sqrt(2.0)):
            raise ValueError("q must lie in (1, sqrt(2))")
        if self.k_max < 2:
            raise ValueError("k_max must be >= 2")
        ks = np.arange(self.k_max + 1)
        tails = self.T / self.q**ks
        object.__setattr__(self, "tails", tails)
        object.__setattr__(self, "points", self.T - tails)
        self.points.setflags(write=False)
        self.tails.setflags(write=False)


def make_time_grid(T, q, k_max):
    return TimeGrid(T=T, q=q, k_max=int(k_max))


def verify_weight_relation(ws, tg):
    """Max relative error of rho_0(T_{k+2}) = rho_F(T_k) e^{K/(T_{k+2}-T_{k+1})}.

    Evaluated for k = 0..k_max-2 through the defining formulas (raw, not
    extended) of the schedule's stored coefficients, in 50-digit
    arithmetic so the result reflects the identity rather than float
    cancellation in the huge exponents. Returns a dict report.
    """
    errs = []
    with mpmath.workdps(50):
        q = mpmath.mpf(tg.q)
        T = mpmath.mpf(tg.T)
        c0 = mpmath.mpf(ws.coef0)
        cF = mpmath.mpf(ws.coefF)
        K = mpmath.mpf(ws.K)
        for k in range(tg.k_max - 1):
            tail_k = T / q**k
            tail_k1 = T / q ** (k + 1)
            tail_k2 = T / q ** (k + 2)
            log_lhs = -c0 / tail_k2
            log_rhs = -cF / tail_k + K / (tail_k1 - tail_k2)
            errs.append(abs(mpmath.expm1(log_lhs - log_rhs)))
        max_err = float(max(errs)) if errs else 0.0
    return {"max_rel_error": max_err, "per_k": [float(e) for e in errs]}


def slice_steps(t0, t1, dt_target):
    m = max(MIN_STEPS_PER_SLICE, int(np.ceil((t1 - t0) / dt_target - 1e-12)))
    return np.full(m, (t1 - t0) / m)


def composite_step_grid(tg, M):
    """Left endpoints and step sizes of the full assembly grid.

    The grid covers every slice of tg plus the tail (T_{k_max}, T) and is
    independent of how many slices end up being controlled, so repeated
    assemblies (the fixed-point iteration) share one grid.
    """
    dt_target = tg.T / M
    dts, lefts = [], []
    bounds = list(tg.points) + [tg.T]
    for t0, t1 in zip(bounds[:-1], bounds[1:]):
        seg = slice_steps(t0, t1, dt_target)
        lefts.extend((t0 + np.cumsum(np.concatenate([[0.0], seg[:-1]]))).tolist())
        dts.extend(seg.tolist())
    return np.array(lefts), np.array(dts)


@dataclass
class PiecewiseControl:
    """Controls per slice plus the slice layout; zero beyond the last slice."""

    slices: list                  # dicts: k, t0, t1, dts, h, cost, cg_iterations
    tg: TimeGrid
    ws: WeightSchedule

    def concatenated(self, total_steps, n):
        h = np.zeros((total_steps, n))
        pos = 0
        for s in self.slices:
            m = len(s["dts"])
            h[pos:pos + m] = s["h"]
            pos += m
        return h


@dataclass
class AssemblyResult:
    trajectory: Trajectory        # glued trajectory on the composite grid
    control: PiecewiseControl
    step_lefts: np.ndarray        # (total_steps,) left endpoints
    step_dts: np.ndarray          # (total_steps,)
    k_stop: int                   # number of slices that were actively controlled
    restart_norms: list           # |m_k|_{-1} entering each slice
    weighted_u_norm: float        # sup_{t <= T_{k_stop}} |u(t)|_{-1} / rho_0(t)
    weighted_h_norm: float        # ||h / rho_0||_{L^2((0,T) x omega)}
    weighted_f_norm: float        # ||f / rho_F|| in the -2 surrogate
    terminal_u_norm: float        # |u(T)|_{-1}


def assemble_source_term_control(u0, f, params, ops, window, ws, tg, M, cfg,
                                 realizer=None, restart_stop=RESTART_STOP):
    """Glued piecewise null-control for the system with source f.

    f is None or an array of per-step source samples on the composite
    grid of (tg, M) (see composite_step_grid). Slices whose incoming
    state is already below restart_stop are not controlled; the stepping
    still walks them (free system with source), so the trajectory always
    reaches T on the same grid.
    """
    grid = ops.grid
    n = grid.n_interior
    realizer = realizer or NegNormRealizer.from_operators(ops)
    system = System(params, ops, window)
    dt_target = tg.T / M

    lefts_all, dts_all = composite_step_grid(tg, M)
    total = len(dts_all)
    if f is not None:
        f = np.asarray(f, dtype=float)
        if f.shape != (total, n):
            raise ValueError(f"source must have shape {(total, n)}, got {f.shape}")

    m_state = np.asarray(u0, dtype=float).copy()
    restart_norms = [realizer.neg_norm(m_state, -1)]
    slices = []
    all_u = [m_state.copy()]
    pos = 0
    k_stop = 0
    bounds = list(tg.points) + [tg.T]
    for k in range(tg.k_max + 1):
        t0, t1 = bounds[k], bounds[k + 1]
        seg = slice_steps(t0, t1, dt_target)
        mseg = len(seg)
        fseg = None if f is None else f[pos:pos + mseg]
        controlled = k < tg.k_max and restart_norms[-1] >= restart_stop
        if controlled:
            try:
                ctrl = compute_null_control(m_state, params, ops, window,
                                            t1 - t0, mseg, cfg, realizer, dts=seg)
            except CGError as exc:
                raise CGError(f"slice k={k} ({t0:.6g},{t1:.6g}): {exc}",
                              iterations=exc.iterations, residual=exc.residual) from exc
            free = system.forward_linear(np.zeros(n), f=fseg, dts=seg)
            glued_u = free.u + ctrl.trajectory.u
            slices.append({
                "k": k, "t0": t0, "t1": t1, "dts": seg, "h": ctrl.h,
                "cost": control_cost(grid, window, seg, ctrl.h),
                "cg_iterations": ctrl.cg_iterations,
                "restart_norm": restart_norms[-1],
            })
            k_stop = k + 1
        else:
            glued_u = system.forward_linear(m_state, f=fseg, dts=seg).u
        m_state = glued_u[-1].copy()
        if k < tg.k_max:
            restart_norms.append(realizer.neg_norm(m_state, -1))
        all_u.extend(list(glued_u[1:]))
        pos += mseg

    times = np.concatenate([lefts_all, [tg.T]])
    us = np.array(all_u)
    vs = np.array([system.elliptic.solve(params.b * uu) for uu in us])
    traj = Trajectory(times=times, u=us, v=vs)
    control = PiecewiseControl(slices=slices, tg=tg, ws=ws)

    # weighted norms over the actively controlled range [0, T_{k_stop}]
    t_cut = bounds[k_stop]
    wu = 0.0
    for j, t in enumerate(times):
        if t > t_cut + 1e-14:
            break
        r = ws.rho0(t)
        if r > 0:
            wu = max(wu, realizer.neg_norm(us[j], -1) / r)
    hfull = control.concatenated(total, n)
    chi = window.indicator(grid)
    wh2 = 0.0
    wf2 = 0.0
    for j, t in enumerate(lefts_all):
        if t > t_cut:
            break
        r0 = ws.rho0(t)
        if r0 > 0:
            hw = chi * hfull[j]
            wh2 += dts_all[j] * grid.h * np.sum((hw / r0) ** 2)
        if f is not None:
            rF = ws.rhoF(t)
            if rF > 0:
                wf2 += dts_all[j] * (realizer.neg_norm(f[j], -2) / rF) ** 2

    return AssemblyResult(
        trajectory=traj,
        control=control,
        step_lefts=lefts_all,
        step_dts=dts_all,
        k_stop=k_stop,
        restart_norms=restart_norms,
        weighted_u_norm=wu,
        weighted_h_norm=float(np.sqrt(wh2)),
        weighted_f_norm=float(np.sqrt(wf2)),
        terminal_u_norm=realizer.neg_norm(us[-1], -1),
    )
