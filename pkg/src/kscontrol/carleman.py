"""Carleman weight machinery and numerical audits of the estimates.

The auxiliary profile nu is built as nu0(psi(x)) with nu0(y) = y(1-y)
and psi an increasing cubic fixed by psi(0)=0, psi(1)=1, psi(x_c)=1/2,
so nu is positive inside (0,1), vanishes at the ends, and has its single
critical point at the center x_c of the inner observation window. The
time-space weights are

    phi(t,x) = (e^{2 lambda k |nu|_inf} - e^{lambda(k |nu|_inf + nu(x))}) / (t(T-t))
    xi(t,x)  = e^{lambda(k |nu|_inf + nu(x))} / (t(T-t))

with k > 1 so the numerator of phi stays positive. The audit evaluates
the weighted integrals appearing on both sides of the estimates on
computed adjoint trajectories and reports observation/energy ratios;
it never claims the constants, only measures them.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class NuFunction:
    omega0: tuple
    x_c: float
    coeffs: tuple          # cubic psi(x) = 1/2 + s*(x-x_c) + A*(x-x_c)^2 + B*(x-x_c)^3
    c_hat: float = 0.0     # min |nu'| outside omega0, filled by build_nu
    max_nu: float = 0.25   # |nu|_inf = nu0(1/2)

    def psi(self, x):
        s, A, B = self.coeffs
        d = np.asarray(x, dtype=float) - self.x_c
        return 0.5 + s * d + A * d**2 + B * d**3

    def psi_prime(self, x):
        s, A, B = self.coeffs
        d = np.asarray(x, dtype=float) - self.x_c
        return s + 2 * A * d + 3 * B * d**2

    def nu(self, x):
        y = self.psi(x)
        return y * (1.0 - y)

    def nu_prime(self, x):
        return (1.0 - 2.0 * self.psi(x)) * self.psi_prime(x)


def _cubic_through(x_c, slope):
    """Cubic with psi(0)=0, psi(1)=1, psi(x_c)=1/2, psi'(x_c)=slope."""
    # two linear equations for (A, B)
    d0, d1 = -x_c, 1.0 - x_c
    M = np.array([[d0**2, d0**3], [d1**2, d1**3]])
    rhs = np.array([0.0 - (0.5 + slope * d0), 1.0 - (0.5 + slope * d1)])
    A, B = np.linalg.solve(M, rhs)
    return (slope, A, B)


def _strictly_increasing(coeffs, x_c):
    """Exact positivity check of the quadratic psi' on [0,1]."""
    s, A, B = coeffs
    # psi'(x) = s + 2A d + 3B d^2, d = x - x_c, d in [-x_c, 1-x_c]
    lo, hi = -x_c, 1.0 - x_c
    vals = [s + 2 * A * d + 3 * B * d**2 for d in (lo, hi)]
    if abs(B) > 1e-300:
        d_star = -A / (3.0 * B)
        if lo < d_star < hi:
            vals.append(s + 2 * A * d_star + 3 * B * d_star**2)
    return min(vals) > 0.0


def build_nu(omega0):
    """Profile with one critical point at the midpoint of omega0.

    Rejects windows touching the boundary. The slope at x_c is relaxed
    from 1 downward until the cubic reparametrization is strictly
    increasing (always possible for interior x_c).
    """
    l1, l2 = omega0
    if not (0.0 < l1 < l2 < 1.0):
        raise ValueError(f"omega0 must be strictly inside (0,1), got {omega0}")
    x_c = 0.5 * (l1 + l2)
    coeffs = None
    for slope in (1.0, 0.75, 0.5, 0.35, 0.25, 0.15, 0.1, 0.05):
        cand = _cubic_through(x_c, slope)
        if _strictly_increasing(cand, x_c):
            coeffs = cand
            break
    if coeffs is None:
        raise ValueError(f"no increasing cubic reparametrization for x_c={x_c}")
    nu = NuFunction(omega0=(l1, l2), x_c=x_c, coeffs=coeffs)
    xs = np.linspace(0.0, 1.0, 20001)
    outside = (xs <= l1) | (xs >= l2)
    nu.c_hat = float(np.min(np.abs(nu.nu_prime(xs[outside]))))
    return nu


@dataclass
class CarlemanWeights:
    nu: NuFunction
    s: float
    lam: float
    k: float
    T: float

    def __post_init__(self):
        if self.k <= 1.0:
            raise ValueError("k must exceed 1 (keeps phi positive)")
        if self.s <= 0 or self.lam <= 0:
            raise ValueError("s and lambda must be positive")

    def _tau(self, t):
        return t * (self.T - t)

    def exp_nu(self, x):
        return np.exp(self.lam * (self.k * self.nu.max_nu + self.nu.nu(x)))

    def phi(self, t, x):
        top = np.exp(2 * self.lam * self.k * self.nu.max_nu) - self.exp_nu(x)
        return top / self._tau(t)

    def xi(self, t, x):
        return self.exp_nu(x) / self._tau(t)

    def log_weight(self, t, x, power):
        """log(e^{-2 s phi} xi^power), stable for large s."""
        tau = self._tau(t)
        en = self.exp_nu(x)
        top = np.exp(2 * self.lam * self.k * self.nu.max_nu) - en
        return -2.0 * self.s * top / tau + power * (np.log(en) - np.log(tau))

    def weight(self, t, x, power):
        return np.exp(self.log_weight(t, x, power))


def build_weights(nu, s, lam, k, T):
    return CarlemanWeights(nu=nu, s=s, lam=lam, k=k, T=T)


@dataclass
class CarlemanAudit:
    lhs_ks: float
    lhs_second: float       # I_E for the elliptic limit, I_H(eps) otherwise
    rhs: float
    ratio: float            # rhs / (lhs_ks + lhs_second)
    s: float
    lam: float
    terms: dict = field(default_factory=dict)


def _quad_weights(times):
    """Trapezoid weights in time, endpoints excluded (weights vanish there)."""
    w = np.zeros_like(times)
    w[1:-1] = 0.5 * (times[2:] - times[:-2])
    return w


def eval_functionals(traj, w, ops, window, eps=None):
    """Weighted energy functionals of an adjoint trajectory.

    traj: adjoint Trajectory (u=sigma, v=psi). Derivatives are formed
    with the discrete operators; sigma_t and psi_t by centered time
    differences. Quadrature is tensor trapezoid over interior time
    slices (the weights vanish double-exponentially at t=0 and t=T).
    Returns a CarlemanAudit; the observation side uses the window and
    the powers of the inequality being audited (sigma^2 xi^15 for the
    ks channel, psi^2 xi^11 otherwise).
    """
    grid = ops.grid
    times = traj.times
    sig = traj.u
    psi = traj.v
    nst = len(times) - 1
    h = grid.h
    x = grid.nodes
    s, lam = w.s, w.lam
    tw = _quad_weights(times)
    chi = window.indicator(grid)
    ks_channel = window.target_equation == "ks"

    # centered time derivatives on interior slices
    def time_deriv(fields):
        d = np.zeros_like(fields)
        d[1:-1] = (fields[2:] - fields[:-2]) / (times[2:] - times[:-2])[:, None]
        return d

    sig_t = time_deriv(sig)
    psi_t = time_deriv(psi) if eps is not None else None

    def integral(fields2, power):
        """sum_t tw * h * sum_x e^{-2 s phi} xi^power * fields2."""
        acc = 0.0
        for m in range(1, nst):
            lw = w.log_weight(times[m], x, power)
            acc += tw[m] * h * float(np.sum(np.exp(lw) * fields2[m]))
        return acc

    terms = {}
    terms["ks_0"] = s**7 * lam**8 * integral(sig**2, 7)
    dx1 = np.array([ops.D1 @ f for f in sig])
    terms["ks_1"] = s**5 * lam**6 * integral(dx1**2, 5)
    dx2 = np.array([ops.D2 @ f for f in sig])
    terms["ks_2"] = s**3 * lam**4 * integral(dx2**2, 3)
    dx3 = np.array([ops.D3 @ f for f in sig])
    terms["ks_3"] = s * lam**2 * integral(dx3**2, 1)
    dx4 = np.array([ops.D4 @ f for f in sig])
    terms["ks_4"] = (1.0 / s) * integral(dx4**2 + sig_t**2, -1)
    lhs_ks = sum(terms[k] for k in ("ks_0", "ks_1", "ks_2", "ks_3", "ks_4"))

    pdx1 = np.array([ops.D1 @ f for f in psi])
    pdx2 = np.array([ops.D2 @ f for f in psi])
    terms["e_0"] = s**3 * lam**4 * integral(psi**2, 3)
    terms["e_1"] = s * lam**2 * integral(pdx1**2, 1)
    terms["e_2"] = (1.0 / s) * integral(pdx2**2, -1)
    lhs_second = terms["e_0"] + terms["e_1"] + terms["e_2"]
    if eps is not None:
        terms["e_t"] = eps**2 / s * integral(psi_t**2, -1)
        lhs_second += terms["e_t"]

    if ks_channel:
        rhs = s**15 * lam**16 * integral(chi * sig**2, 15)
    else:
        rhs = s**11 * lam**12 * integral(chi * psi**2, 11)
    denom = lhs_ks + lhs_second
    ratio = float(rhs / denom) if denom > 0 else float("nan")
    return CarlemanAudit(lhs_ks=lhs_ks, lhs_second=lhs_second, rhs=rhs,
                         ratio=ratio, s=s, lam=lam, terms=terms)
