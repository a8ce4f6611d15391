"""Hamiltonian flow of q = xi^2 + V(x) with its variational (Jacobi) data.

State layout used throughout: ``(x, xi, X_y, Xi_y, X_eta, Xi_eta)`` where
``X_y = dx/dy`` etc. are derivatives with respect to the initial data
``(y, eta)``.  The variational equations are integrated jointly with the
flow:

    x' = 2 xi,        xi' = -V'(x),
    X' = 2 Xi,        Xi' = -V''(x) X.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .geometry import ManifoldParams, ModelPotential, RescaledPotential, principal_potential, warp_A
from .propagator import bump, bump_d1, bump_d2

__all__ = [
    "FlowState",
    "FlowDomainError",
    "DyadicPartition",
    "PartitionError",
    "integrate_flow",
    "flow_batch",
    "shi_regime_bounds",
    "make_partition",
    "exit_time_dyadic",
    "nontrapping_check",
    "modified_warp_inv2",
    "jacobi_small_time",
    "DEFAULTS",
    "trajectory_csv",
]

# defaults where only "sufficiently small" constants are available
DEFAULTS = {"delta": 0.1, "omega": 2.0, "a": 0.05, "b": 0.05, "epsilon": 0.1, "rtol": 1e-10, "atol": 1e-12}


class FlowDomainError(RuntimeError):
    """A trajectory left the region where the potential is valid."""

    def __init__(self, msg, t=None, x=None):
        super().__init__(msg)
        self.t, self.x = t, x


@dataclass(frozen=True)
class FlowState:
    t: float
    x: float
    xi: float
    dxdy: float
    dxidy: float
    dxdeta: float
    dxideta: float

    @property
    def symplectic_det(self) -> float:
        return self.dxdy * self.dxideta - self.dxdeta * self.dxidy

    def energy(self, potential) -> float:
        return self.xi**2 + float(potential(self.x))


def _rhs(potential):
    def f(t, s):
        x, xi, X, Xi, Y, Yi = s.reshape(6, -1)
        d1, d2 = potential.d1(x), potential.d2(x)
        return np.concatenate([2 * xi, -d1, 2 * Xi, -d2 * X, 2 * Yi, -d2 * Y])

    return f


def flow_batch(y, eta, potential, t_eval, rtol: float = 1e-10, atol: float = 1e-12,
               x_limit: float | None = None, method: str = "DOP853"):
    """Integrate many trajectories at once.

    Returns an array of shape (6, len(t_eval), n) with rows
    (x, xi, X_y, Xi_y, X_eta, Xi_eta).
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    eta = np.broadcast_to(np.asarray(eta, dtype=float), y.shape).copy()
    n = y.size
    s0 = np.concatenate([y, eta, np.ones(n), np.zeros(n), np.zeros(n), np.ones(n)])
    t_eval = np.asarray(t_eval, dtype=float)
    events = None
    if x_limit is not None:
        def leave(t, s):
            return x_limit - np.max(np.abs(s[:n]))
        leave.terminal = True
        events = leave
    sol = solve_ivp(_rhs(potential), (0.0, float(t_eval[-1])), s0, method=method, t_eval=t_eval,
                    rtol=rtol, atol=atol, events=events)
    if sol.status == 1:
        te = float(sol.t_events[0][0])
        xe = sol.y_events[0][0][:n]
        i = int(np.argmax(np.abs(xe)))
        raise FlowDomainError(f"trajectory from y={y[i]:.6g}, eta={eta[i]:.6g} left |x| <= {x_limit} "
                              f"at t={te:.6g}, x={xe[i]:.6g}", te, float(xe[i]))
    if sol.status != 0:
        raise RuntimeError(f"flow integration failed: {sol.message}")
    return sol.y.reshape(6, n, -1).transpose(0, 2, 1)


def integrate_flow(y: float, eta: float, potential, t_final: float, tol: float = 1e-10,
                   atol: float = 1e-12, t_eval=None, x_limit: float | None = None) -> list[FlowState]:
    """Trajectory from (y, eta) with variational data, sampled at ``t_eval``.

    ``potential`` must provide ``d1`` and ``d2``.  ``x_limit`` bounds the
    region of validity; leaving it raises ``FlowDomainError`` with the exit
    time and location.
    """
    if t_eval is None:
        t_eval = np.linspace(0.0, t_final, 101)
    data = flow_batch([y], [eta], potential, t_eval, rtol=tol, atol=atol, x_limit=x_limit)[:, :, 0]
    return [FlowState(float(t), *map(float, data[:, i])) for i, t in enumerate(t_eval)]


def jacobi_small_time(potential, y_range, eta_range, t_max: float, n: int = 9, nt: int = 40) -> dict:
    """Fit dx/deta = 2t (1 + r(t)) with |r| <= C t over a grid of initial data."""
    ys = np.linspace(*y_range, n)
    es = np.linspace(*eta_range, n)
    Y, E = np.meshgrid(ys, es)
    t = np.linspace(0, t_max, nt + 1)
    d = flow_batch(Y.ravel(), E.ravel(), potential, t)
    r = d[4, 1:, :] / (2 * t[1:, None]) - 1
    C = float(np.max(np.abs(r) / t[1:, None]))
    return {"C": C, "t_max": t_max, "max_r": float(np.max(np.abs(r)))}


def shi_regime_bounds(epsilon: float, p: ManifoldParams, sample_count: int = 15,
                      eta_max: float = 1.0, tol: float = 1e-10) -> dict:
    """Flow bounds for |y| <= 2 eps, eta >= eps under V = A^{-2}.

    For each sample the flow is followed until |x| first exceeds 2 eps (the
    exit time).  Reports sup|dx/dy - 1| over t up to the exit time, the
    largest exit time in units of eps/eta, and the drift of x from the
    straight line y + 2 t eta in units of t eta.
    """

    class _Principal:
        id = "principal"

        def __call__(self, x):
            return principal_potential(x, p)

        def d1(self, x):
            return principal_potential(x, p, 1)

        def d2(self, x):
            return principal_potential(x, p, 2)

    pot = _Principal()
    ys = np.linspace(-2 * epsilon, 2 * epsilon, sample_count)
    es = np.geomspace(epsilon, max(eta_max, epsilon * 1.0001), sample_count)
    Y, E = np.meshgrid(ys, es)
    Y, E = Y.ravel(), E.ravel()
    # straight-line exit takes at most 4 eps / (2 eta); integrate a little past it
    horizon = 4.0 * epsilon / E
    nt = 400
    s = np.linspace(0, 1, nt + 1)
    dev, drift, exit_c = 0.0, 0.0, 0.0
    for i in range(Y.size):
        t = horizon[i] * s
        d = flow_batch([Y[i]], [E[i]], pot, t, rtol=tol)[:, :, 0]
        x = d[0]
        out = np.nonzero(np.abs(x) > 2 * epsilon)[0]
        k = out[0] if out.size else len(t)
        if out.size:
            # linear interpolation of the crossing time
            t0, t1, x0, x1 = t[k - 1], t[k], abs(x[k - 1]), abs(x[k])
            te = t0 + (2 * epsilon - x0) * (t1 - t0) / (x1 - x0)
            exit_c = max(exit_c, te * E[i] / epsilon)
        else:
            exit_c = math.inf
        dev = max(dev, float(np.max(np.abs(d[2, :k] - 1))))
        tt = t[1:k]
        if tt.size:
            drift = max(drift, float(np.max(np.abs(x[1:k] - Y[i] - 2 * tt * E[i]) / (2 * tt * E[i]))))
    return {
        "epsilon": epsilon, "m": p.m, "samples": int(Y.size),
        "sup_dxdy_dev": dev, "exit_C": exit_c, "line_drift": drift,
        "order_ref": epsilon ** (2 * p.m - 2),
    }


class PartitionError(ValueError):
    pass


def _rise(x, a: float, b: float):
    """Smooth step from 0 (x <= a) to 1 (x >= b) built from the canonical bump."""
    u = (np.asarray(x, dtype=float) - a) / (b - a)
    return 1.0 - bump(1.0 + np.clip(u, 0.0, 1.0))


def _rise_derivs(x, a: float, b: float):
    w = b - a
    u = (np.asarray(x, dtype=float) - a) / w
    inside = (u > 0) & (u < 1)
    d1 = np.where(inside, -bump_d1(1.0 + np.clip(u, 0, 1)) / w, 0.0)
    d2 = np.where(inside, -bump_d2(1.0 + np.clip(u, 0, 1)) / w**2, 0.0)
    return d1, d2


@dataclass
class DyadicPartition:
    """Intervals I_j = [delta(omega^j - omega^{j-2}), delta(omega^{j+1} + omega^{j-1})].

    Coordinates are the blown-up ones (x / h^{1/(m+1)}).  ``N`` intervals
    j = 0..N-1 are kept, N-1 being the first index with y_j^+ >= X where
    X = 2 eps h^{-1/(m+1)}.
    """

    delta: float
    omega: float
    epsilon: float
    h: float
    m: int
    intervals: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.intervals)

    @property
    def X(self) -> float:
        return 2 * self.epsilon * self.h ** (-1.0 / (self.m + 1))

    def y_minus(self, j):
        return self.delta * (self.omega**j - self.omega ** (j - 2))

    def y_plus(self, j):
        return self.delta * (self.omega ** (j + 1) + self.omega ** (j - 1))

    def _edges(self, j):
        """Rising edge of psi_j and its falling edge (the rise of psi_{j+1})."""
        up = (self.y_minus(j), self.y_plus(j - 1)) if j > 0 else (self.y_minus(0), self.delta * (1 + self.omega**-2))
        if j < self.N - 1:
            down = (self.y_minus(j + 1), self.y_plus(j))
        else:
            # last cutoff: stay 1 up to X, then fall off inside I_j when there is room
            width = max(self.y_plus(j) - self.X, 2 * self.delta * self.omega ** (j - 2))
            down = (self.X, self.X + width)
        return up, down

    def psi(self, j: int, x):
        """j-th cutoff evaluated at blown-up coordinate x (x >= 0 branch)."""
        (a0, b0), (a1, b1) = self._edges(j)
        return _rise(x, a0, b0) - _rise(x, a1, b1)

    def psi_derivs(self, j: int, x):
        (a0, b0), (a1, b1) = self._edges(j)
        r0, r1 = _rise_derivs(x, a0, b0), _rise_derivs(x, a1, b1)
        return r0[0] - r1[0], r0[1] - r1[1]

    def psi0(self, x):
        (a0, b0), _ = self._edges(0)
        return 1.0 - _rise(np.abs(x), a0, b0)

    def total(self, x):
        """psi_0(x) + sum_j (psi_j(x) + psi_j(-x))."""
        x = np.asarray(x, dtype=float)
        s = self.psi0(x)
        for j in range(self.N):
            s = s + self.psi(j, x) + self.psi(j, -x)
        return s

    def report(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "intervals"}
        d.update(N=self.N, X=self.X, intervals=[list(iv) for iv in self.intervals],
                 log_constant=self.N / math.log(1 / self.h))
        return d


def make_partition(delta: float = DEFAULTS["delta"], omega: float = DEFAULTS["omega"],
                   epsilon: float = DEFAULTS["epsilon"], h: float = 1e-2, p: ManifoldParams | int = 2,
                   max_intervals: int = 200) -> DyadicPartition:
    """Build the dyadic partition of [delta, 2 eps h^{-1/(m+1)}] (blown-up coordinates)."""
    m = p.m if isinstance(p, ManifoldParams) else int(p)
    if delta <= 0 or omega <= 1 or not 0 < h < 1 or epsilon <= 0:
        raise PartitionError("need delta > 0, omega > 1, 0 < h < 1, epsilon > 0")
    part = DyadicPartition(delta, omega, epsilon, h, m)
    X = part.X
    if X <= delta:
        raise PartitionError(f"target interval [delta, {X:.4g}] is empty; decrease delta or h")
    j = 0
    while True:
        lo, hi = part.y_minus(j), part.y_plus(j)
        if part.intervals and lo >= part.intervals[-1][1]:
            raise PartitionError("consecutive intervals do not overlap")
        part.intervals.append((lo, hi))
        if hi >= X:
            break
        j += 1
        if j > max_intervals:
            raise PartitionError("too many intervals")
    if part.intervals[0][0] > delta:
        raise PartitionError("first interval does not reach delta")
    return part


def partition_derivative_constants(part: DyadicPartition, n: int = 4001) -> dict:
    """C_k = max_j sup|d^k psi_j| (delta omega^{j-2})^k for k = 1, 2 (uniform in j by scaling)."""
    C = [0.0, 0.0]
    for j in range(part.N):
        lo, hi = part.y_minus(j), part.y_plus(j) + part.X
        x = np.linspace(max(lo - 1e-9, 0), hi, n)
        d1, d2 = part.psi_derivs(j, x)
        s = part.delta * part.omega ** (j - 2)
        C[0] = max(C[0], float(np.max(np.abs(d1))) * s)
        C[1] = max(C[1], float(np.max(np.abs(d2))) * s**2)
    return {"C1": C[0], "C2": C[1]}


def exit_time_dyadic(j: int, partition: DyadicPartition, a: float = DEFAULTS["a"],
                     b: float = DEFAULTS["b"], potential=None, n_y: int = 5, n_eta: int = 5,
                     eta_max_factor: float = 1.0) -> dict:
    """Times for outgoing data on I_j to gain momentum b (y_j^-)^m and to leave I_j.

    Initial data: y in I_j, eta in [-a (y_j^+)^m, eta_max_factor (y_j^+)^m].
    Both times are reported in units of (y_j^-)^{1-m}.  ``potential``
    defaults to the blown-up potential at the partition's h with the
    barrier top removed.
    """
    m = partition.m
    if potential is None:
        potential = RescaledPotential(partition.h, ManifoldParams(m, 3), include_v1=False, shift="top")
    lo, hi = partition.y_minus(j), partition.y_plus(j)
    unit = lo ** (1 - m)
    ys = np.linspace(lo, hi, n_y + 2)[1:-1]
    es = np.linspace(-a * hi**m, eta_max_factor * hi**m, n_eta)
    Y, E = np.meshgrid(ys, es)
    Y, E = Y.ravel(), E.ravel()
    # generous horizon: straight-line time over the interval at the smallest useful speed
    horizon = 50.0 * unit
    t = np.linspace(0, horizon, 4001)
    d = flow_batch(Y, E, potential, t)
    x, xi = d[0], d[1]
    t_mom = np.full(Y.size, np.nan)
    t_exit = np.full(Y.size, np.nan)
    anomaly = False
    for i in range(Y.size):
        k1 = np.nonzero(xi[:, i] >= b * lo**m)[0]
        k2 = np.nonzero(x[:, i] >= hi)[0]
        if k1.size:
            t_mom[i] = t[k1[0]]
        if k2.size:
            t_exit[i] = t[k2[0]]
            # after reaching positive momentum the trajectory must not come back
            post = x[k2[0]:, i]
            if np.any(post < hi - 1e-9):
                anomaly = True
        else:
            anomaly = True
    return {
        "j": j, "y_minus": lo, "y_plus": hi, "unit": unit,
        "momentum_time": float(np.nanmax(t_mom)) / unit, "exit_time": float(np.nanmax(t_exit)) / unit,
        "momentum_time_min": float(np.nanmin(t_mom)) / unit, "exit_time_min": float(np.nanmin(t_exit)) / unit,
        "exit_time_abs": float(np.nanmax(t_exit)), "anomaly": anomaly, "a": a, "b": b,
    }


def modified_warp_inv2(x, epsilon: float, p: ManifoldParams, order: int = 0):
    """A~^{-2} = chi(x/eps) x^{-2} + (1 - chi(x/eps)) A^{-2} for x > 0 (order 0 or 1)."""
    x = np.asarray(x, dtype=float)
    c = bump(x / epsilon)
    a2 = principal_potential(x, p)
    if order == 0:
        return c * x**-2.0 + (1 - c) * a2
    c1 = bump_d1(x / epsilon) / epsilon
    return -2 * c * x**-3.0 + (1 - c) * principal_potential(x, p, 1) + c1 * (x**-2.0 - a2)


def nontrapping_check(epsilon: float, p: ManifoldParams, n_samples: int = 100_000,
                      x_max: float = 50.0, n_geodesics: int = 24, escape_radius: float = 100.0,
                      t_max: float = 1000.0) -> tuple[bool, dict]:
    """Check (A~^{-2})' < 0 on (0, x_max] and that sampled unit-energy geodesics escape.

    Geodesics of p~ = xi^2 + A~^{-2}(x) eta^2 with eta fixed:
    x' = 2 xi, xi' = -(A~^{-2})'(x) eta^2.
    """
    x = np.geomspace(epsilon * 1e-3, x_max, n_samples)
    d = modified_warp_inv2(x, epsilon, p, 1)
    bad = np.nonzero(d >= 0)[0]
    report = {"epsilon": epsilon, "m": p.m, "samples": n_samples, "max_derivative": float(d.max())}
    if bad.size:
        report["violation_x"] = float(x[bad[0]])
        return False, report
    # geodesics: start at x0 in (0, 4 eps], unit energy, eta != 0, both directions
    rng_x = np.linspace(0.5 * epsilon, 4 * epsilon, n_geodesics // 2)
    escape_times = []
    for x0 in rng_x:
        a2 = float(modified_warp_inv2(x0, epsilon, p))
        for frac, sgn in ((0.5, 1), (0.5, -1), (0.95, -1)):
            eta = frac / math.sqrt(a2)
            xi0 = sgn * math.sqrt(max(1 - a2 * eta**2, 0.0))

            def rhs(t, s, eta=eta):
                return [2 * s[1], -float(modified_warp_inv2(s[0], epsilon, p, 1)) * eta**2]

            def far(t, s):
                return abs(s[0]) - escape_radius
            far.terminal = True
            sol = solve_ivp(rhs, (0, t_max), [x0, xi0], method="DOP853", rtol=1e-10, atol=1e-12, events=far)
            te = sol.t_events[0]
            escape_times.append(float(te[0]) if te.size else math.inf)
    report["max_escape_time"] = max(escape_times)
    report["geodesics"] = len(escape_times)
    # eta = 0: straight lines, exact
    ok = bool(np.all(np.isfinite(escape_times)))
    return ok, report


def trajectory_csv(states: Sequence[FlowState]) -> str:
    """CSV text with columns t, x, xi and the four variational entries."""
    cols = ("t", "x", "xi", "dxdy", "dxidy", "dxdeta", "dxideta")
    lines = [",".join(cols)]
    for s in states:
        lines.append(",".join(repr(float(getattr(s, c))) for c in cols))
    return "\n".join(lines) + "\n"
