"""Time integration of the coupled systems and their discrete adjoints.

Scheme: first-order IMEX. The stiff fourth/third/second-order part of
the u-equation and the v-relaxation are implicit; the cross couplings
(and the quadratic term) are explicit. One forward step of the
elliptic-limit system with step dt is

    w      = (I + dt*A)^-1 (u_m + dt*(f_m + chi_w h_m))      [ks channel]
    v_next = (L + cI)^-1 (b*w + chi_w h_m)                   [h enters here
                                                              on the elliptic
                                                              channel instead]
    u_next = w + dt*a*v_next

with A = gamma1*D4 + D3 + gamma2*D2. The backward solvers implement the
exact transpose of this one-step map (discrete adjoint), which makes the
forward/backward duality identity hold to roundoff and the HUM Gramian
exactly symmetric. The two-parabolic variant replaces the elliptic solve
by ((eps/dt)I + L + cI)^-1 ((eps/dt) v_m + ...) and degenerates to the
elliptic step as eps -> 0 at fixed dt.

Sources and controls are sampled per step: arrays of shape (M, n), entry
m paired with the step t_m -> t_{m+1}. Forward sources are read at the
left endpoint, adjoint sources at the right one (the transpose slot).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DivergenceError
from .operators import EllipticSolver, OperatorSet

ELLIPTIC = "elliptic"


@dataclass(frozen=True)
class SystemParams:
    """PDE coefficients; eps is a number in (0,1] or "elliptic" for the limit."""

    gamma1: float
    gamma2: float
    a: float
    b: float
    c: float
    eps: object = ELLIPTIC
    blowup_guard: float = 1e6

    def __post_init__(self):
        # gamma2 = 0 is admitted for the pure-dissipation diagnostics
        if not (self.gamma1 > 0 and self.gamma2 >= 0):
            raise ValueError("gamma1 must be positive and gamma2 nonnegative")
        if self.eps != ELLIPTIC:
            e = float(self.eps)
            if not (0.0 < e <= 1.0):
                raise ValueError(f"eps must lie in (0,1] or be 'elliptic', got {e}")
        if self.c <= -np.pi**2:
            raise ValueError(f"c must exceed -pi^2 = {-np.pi**2:.6f}, got {self.c}")

    @property
    def is_elliptic(self):
        return self.eps == ELLIPTIC


@dataclass(frozen=True)
class ControlWindow:
    """Open control window omega = (l1, l2) and the equation the control acts on."""

    omega: tuple
    target_equation: str = "ks"

    def __post_init__(self):
        l1, l2 = self.omega
        if not (0.0 < l1 < l2 < 1.0):
            raise ValueError(f"window must satisfy 0 < l1 < l2 < 1, got {self.omega}")
        if self.target_equation not in ("ks", "elliptic"):
            raise ValueError(f"target_equation must be 'ks' or 'elliptic'")

    def indicator(self, grid):
        l1, l2 = self.omega
        return ((grid.nodes > l1) & (grid.nodes < l2)).astype(float)


@dataclass
class Trajectory:
    times: np.ndarray  # (M+1,)
    u: np.ndarray      # (M+1, n)
    v: np.ndarray      # (M+1, n)

    @property
    def n_steps(self):
        return len(self.times) - 1


@dataclass
class SourceTerm:
    """Per-step source samples; values[m] acts on the step t_m -> t_{m+1}."""

    values: np.ndarray


def _source_values(f, n_steps):
    if f is None:
        return None
    vals = f.values if isinstance(f, SourceTerm) else np.asarray(f, dtype=float)
    if vals.shape[0] != n_steps:
        raise ValueError(f"source has {vals.shape[0]} slots, expected {n_steps}")
    return vals


def uniform_dts(T, M):
    if M < 1 or T <= 0:
        raise ValueError("need M >= 1 and T > 0")
    return np.full(M, T / M)


def apply_F(ops, u):
    """Quadratic transport term u*u_x as a dual field: 0.5 * D1 (u^2).

    Its discrete pairing with any test vector phi is
    -(1/2) * h * sum(u^2 * D1 phi), because D1 is exactly antisymmetric.
    """
    u = np.asarray(u, dtype=float)
    return 0.5 * (ops.D1 @ (u * u))


class System:
    """Bundles operators, parameters and factofization caches for one setup.

    All solvers are pure with respect to their inputs; the caches only
    memoize LU/Cholesky factors of the implicit matrices, keyed by the
    exact step size (and eps), so repeated calls inside CG loops do not
    refactorize.
    """

    def __init__(self, params: SystemParams, ops: OperatorSet, window: ControlWindow | None = None):
        self.params = params
        self.ops = ops
        self.window = window
        self.grid = ops.grid
        self.n = ops.grid.n_interior
        self.A = params.gamma1 * ops.D4 + ops.D3 + params.gamma2 * ops.D2
        self.elliptic = EllipticSolver(ops, params.c)
        self.chi = window.indicator(ops.grid) if window is not None else None
        self._lu = {}
        self._heat = {}

    # -- factor caches -------------------------------------------------
    def _stiff_lu(self, dt):
        key = float(dt)
        if key not in self._lu:
            self._lu[key] = sla.lu_factor(np.eye(self.n) + dt * self.A)
        return self._lu[key]

    def _heat_solver(self, dt, eps):
        key = (float(dt), float(eps))
        if key not in self._heat:
            shift = eps / dt
            M = self.ops.L_dirichlet + (self.params.c + shift) * np.eye(self.n)
            self._heat[key] = (sla.cho_factor(M), shift)
        return self._heat[key]

    def _guard(self, u, t):
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > self.params.blowup_guard:
            raise DivergenceError(
                f"state exceeded blowup guard {self.params.blowup_guard:g} at t={t:.6g}"
            )

    def _chi_or_raise(self):
        if self.chi is None:
            raise ValueError("this System was built without a control window")
        return self.chi

    # -- elliptic-limit solvers ----------------------------------------
    def forward_linear(self, u0, h=None, f=None, *, T=None, M=None, dts=None):
        """Linear parabolic-elliptic system; control placement per window."""
        p = self.params
        dts = uniform_dts(T, M) if dts is None else np.asarray(dts, dtype=float)
        nst = len(dts)
        hv = _source_values(h, nst)
        fv = _source_values(f, nst)
        ks_channel = self.window is None or self.window.target_equation == "ks"
        chi = self._chi_or_raise() if hv is not None else self.chi

        u = np.asarray(u0, dtype=float).copy()
        us = np.empty((nst + 1, self.n))
        us[0] = u
        t = 0.0
        for m, dt in enumerate(dts):
            rhs = u.copy()
            if fv is not None:
                rhs += dt * fv[m]
            if hv is not None and ks_channel:
                rhs += dt * (chi * hv[m])
            w = sla.lu_solve(self._stiff_lu(dt), rhs)
            src = p.b * w
            if hv is not None and not ks_channel:
                src = src + chi * hv[m]
            vnew = self.elliptic.solve(src)
            u = w + dt * p.a * vnew
            t += dt
            self._guard(u, t)
            us[m + 1] = u

        times = np.concatenate([[0.0], np.cumsum(dts)])
        vs = self._report_v(us, hv, ks_channel)
        return Trajectory(times=times, u=us, v=vs)

    def _report_v(self, us, hv, ks_channel):
        """Elliptic component at each reported time: v = W(b u + chi h)."""
        p = self.params
        nst = us.shape[0] - 1
        vs = np.empty_like(us)
        for m in range(nst + 1):
            src = p.b * us[m]
            if hv is not None and not ks_channel:
                src = src + self.chi * hv[min(m, nst - 1)]
            vs[m] = self.elliptic.solve(src)
        return vs

    def forward_nonlinear(self, u0, h=None, *, T=None, M=None, dts=None, f=None):
        """Same stepping with the explicit conservative term 0.5 (u^2)_x."""
        p = self.params
        dts = uniform_dts(T, M) if dts is None else np.asarray(dts, dtype=float)
        nst = len(dts)
        hv = _source_values(h, nst)
        fv = _source_values(f, nst)
        ks_channel = self.window is None or self.window.target_equation == "ks"
        chi = self._chi_or_raise() if hv is not None else self.chi

        u = np.asarray(u0, dtype=float).copy()
        us = np.empty((nst + 1, self.n))
        us[0] = u
        t = 0.0
        for m, dt in enumerate(dts):
            rhs = u - dt * apply_F(self.ops, u)
            if fv is not None:
                rhs += dt * fv[m]
            if hv is not None and ks_channel:
                rhs += dt * (chi * hv[m])
            w = sla.lu_solve(self._stiff_lu(dt), rhs)
            src = p.b * w
            if hv is not None and not ks_channel:
                src = src + chi * hv[m]
            u = w + dt * p.a * self.elliptic.solve(src)
            t += dt
            self._guard(u, t)
            us[m + 1] = u

        times = np.concatenate([[0.0], np.cumsum(dts)])
        vs = self._report_v(us, hv, ks_channel)
        return Trajectory(times=times, u=us, v=vs)

    def adjoint(self, sigmaT, g=None, *, T=None, M=None, dts=None):
        """Exact transpose of the forward one-step map, integrated backward.

        Returns sigma at every time plus psi = W(a sigma). g is paired at
        the right endpoint of each step (slot m holds g(t_{m+1})).
        """
        p = self.params
        dts = uniform_dts(T, M) if dts is None else np.asarray(dts, dtype=float)
        nst = len(dts)
        gv = _source_values(g, nst)

        s = np.asarray(sigmaT, dtype=float).copy()
        ss = np.empty((nst + 1, self.n))
        ss[nst] = s
        for m in range(nst - 1, -1, -1):
            dt = dts[m]
            psi_hat = self.elliptic.solve(p.a * s)
            rhs = s + dt * p.b * psi_hat
            if gv is not None:
                rhs = rhs + dt * gv[m]
            s = sla.lu_solve(self._stiff_lu(dt), rhs, trans=1)
            ss[m] = s
        self._guard(s, 0.0)

        times = np.concatenate([[0.0], np.cumsum(dts)])
        psis = np.array([self.elliptic.solve(p.a * ss[m]) for m in range(nst + 1)])
        return Trajectory(times=times, u=ss, v=psis)

    # -- two-parabolic (eps) solvers -------------------------------------
    def forward_eps(self, u0, v0, h=None, *, T=None, M=None, dts=None, f1=None, f2=None):
        """Linear two-parabolic system, control in the heat equation."""
        p = self.params
        if p.is_elliptic:
            raise ValueError("forward_eps needs numeric eps; use forward_linear for the limit")
        eps = float(p.eps)
        dts = uniform_dts(T, M) if dts is None else np.asarray(dts, dtype=float)
        nst = len(dts)
        hv = _source_values(h, nst)
        f1v = _source_values(f1, nst)
        f2v = _source_values(f2, nst)
        chi = self._chi_or_raise() if hv is not None else self.chi

        u = np.asarray(u0, dtype=float).copy()
        v = np.asarray(v0, dtype=float).copy()
        us = np.empty((nst + 1, self.n))
        vs = np.empty((nst + 1, self.n))
        us[0], vs[0] = u, v
        t = 0.0
        for m, dt in enumerate(dts):
            cho, shift = self._heat_solver(dt, eps)
            rhs = u.copy()
            if f1v is not None:
                rhs += dt * f1v[m]
            w = sla.lu_solve(self._stiff_lu(dt), rhs)
            heat_rhs = shift * v + p.b * w
            if hv is not None:
                heat_rhs = heat_rhs + chi * hv[m]
            if f2v is not None:
                heat_rhs = heat_rhs + f2v[m]
            v = sla.cho_solve(cho, heat_rhs)
            u = w + dt * p.a * v
            t += dt
            self._guard(u, t)
            self._guard(v, t)
            us[m + 1], vs[m + 1] = u, v

        times = np.concatenate([[0.0], np.cumsum(dts)])
        return Trajectory(times=times, u=us, v=vs)

    def adjoint_eps(self, sigmaT, psiT, g1=None, g2=None, *, T=None, M=None, dts=None):
        """Transpose of forward_eps w.r.t. the pairing <u,s> + eps <v,p>."""
        p = self.params
        if p.is_elliptic:
            raise ValueError("adjoint_eps needs numeric eps")
        eps = float(p.eps)
        dts = uniform_dts(T, M) if dts is None else np.asarray(dts, dtype=float)
        nst = len(dts)
        g1v = _source_values(g1, nst)
        g2v = _source_values(g2, nst)

        s = np.asarray(sigmaT, dtype=float).copy()
        q = np.asarray(psiT, dtype=float).copy()
        ss = np.empty((nst + 1, self.n))
        qs = np.empty((nst + 1, self.n))
        ss[nst], qs[nst] = s, q
        for m in range(nst - 1, -1, -1):
            dt = dts[m]
            cho, shift = self._heat_solver(dt, eps)
            heat_rhs = p.a * s + shift * q
            if g2v is not None:
                heat_rhs = heat_rhs + g2v[m]
            q = sla.cho_solve(cho, heat_rhs)
            rhs = s + dt * p.b * q
            if g1v is not None:
                rhs = rhs + dt * g1v[m]
            s = sla.lu_solve(self._stiff_lu(dt), rhs, trans=1)
            ss[m], qs[m] = s, q

        times = np.concatenate([[0.0], np.cumsum(dts)])
        return Trajectory(times=times, u=ss, v=qs)


# -- module-level wrappers matching the operation contracts ----------------

def solve_forward_linear(params, ops, u0, h, f, T, M, window=None):
    return System(params, ops, window).forward_linear(u0, h, f, T=T, M=M)


def solve_forward_nonlinear(params, ops, u0, h, T, M, window=None):
    return System(params, ops, window).forward_nonlinear(u0, h, T=T, M=M)


def solve_forward_eps(params, ops, u0, v0, h, T, M, window=None):
    return System(params, ops, window).forward_eps(u0, v0, h, T=T, M=M)


def solve_adjoint(params, ops, sigmaT, g, T, M):
    return System(params, ops).adjoint(sigmaT, g, T=T, M=M)


def solve_adjoint_eps(params, ops, sigmaT, psiT, g1, g2, T, M):
    return System(params, ops).adjoint_eps(sigmaT, psiT, g1, g2, T=T, M=M)
