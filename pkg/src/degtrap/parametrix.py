"""WKB parametrix e^{i phi/h} B for h D_t - h^2 d_x^2 + V by characteristics.

The phase solves phi_t + phi_x^2 + V = 0 with phi(0, x, eta) = x eta and the
amplitude B = B_0 + ... + B_K solves

    B_t + 2 phi_x B_x + phi_xx B = i h B_xx,        B_0 = 1,
    B_j(t) = int_0^t (-phi_xx B_{j-1} + i h d_x^2 B_{j-1}) ds   along characteristics.

Everything is computed in Lagrangian labels (y, eta): characteristics are
shot from a y-lattice, and x-derivatives come from d_x = X_y^{-1} d_y.
Values on the Eulerian (t, x, eta) lattice are obtained by inverting the
monotone map y -> x(t; y, eta) with degree-5 splines.  With h = 1 this is
the blown-up problem D_t - d_x^2 + V~.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import make_interp_spline

from .propagator import Grid1D, WaveField, bump, read_container, write_container

__all__ = [
    "PhaseTable",
    "AmplitudeTable",
    "CausticError",
    "InversionError",
    "QuadratureResolutionError",
    "build_phase",
    "build_amplitude",
    "synthesize",
    "synthesize_hat",
    "dispersion_measure",
    "intertwining_check",
    "phase_bounds",
    "FREE_DISPERSION_CONSTANT",
    "save_phase_table",
    "load_phase_table",
]

FREE_DISPERSION_CONSTANT = (4 * math.pi) ** -0.5


class CausticError(RuntimeError):
    def __init__(self, msg, t=None, eta=None):
        super().__init__(msg)
        self.t, self.eta = t, eta


class InversionError(RuntimeError):
    pass


class QuadratureResolutionError(RuntimeError):
    pass


@dataclass
class _Lagrangian:
    """Characteristic data for one eta on the fine time grid."""

    y: np.ndarray
    x: np.ndarray  # (nt_fine, ny)
    Xy: np.ndarray
    Xiy: np.ndarray


@dataclass
class PhaseTable:
    t_samples: np.ndarray
    grid: Grid1D
    eta_samples: np.ndarray
    phi: np.ndarray  # (nt, nx, neta)
    phi_x: np.ndarray
    phi_eta: np.ndarray
    phi_etaeta: np.ndarray
    phi_xx: np.ndarray
    y_label: np.ndarray
    valid: np.ndarray  # (nt, neta)
    eikonal_residual: np.ndarray  # (nt, nx, neta); zero rows at t = 0
    potential_id: str
    meta: dict = field(default_factory=dict)
    t_fine: np.ndarray | None = None
    lagrangian: list = field(default_factory=list, repr=False)

    @property
    def x_samples(self) -> np.ndarray:
        return self.grid.x

    def t_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.t_samples - t)))
        if abs(self.t_samples[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a table time; available: {self.t_samples.tolist()}")
        return i


@dataclass
class AmplitudeTable:
    K: int
    B: np.ndarray  # (K+1, nt, nx, neta) complex
    h_eff: float
    C: list  # C_j = sup |B_j| / t^j over t > 0

    def total(self, K: int | None = None) -> np.ndarray:
        K = self.K if K is None else K
        if K > self.K:
            raise ValueError(f"table holds orders up to {self.K}")
        return self.B[: K + 1].sum(axis=0)


def _derivs(potential, x):
    if hasattr(potential, "derivs"):
        return potential.derivs(x)
    return potential(x), potential.d1(x), potential.d2(x)


def _rhs(potential, n):
    def f(t, s):
        x, xi, X, Xi, Y, Yi, S, Se = s.reshape(8, n)
        v, d1, d2 = _derivs(potential, x)
        return np.concatenate([2 * xi, -d1, 2 * Xi, -d2 * X, 2 * Yi, -d2 * Y,
                               xi * xi - v, 2 * xi * Yi - d1 * Y])

    return f


def _shoot(potential, y, eta, t_eval, rtol, atol):
    n = y.size
    s0 = np.concatenate([y, np.full(n, eta), np.ones(n), np.zeros(n), np.zeros(n), np.ones(n), y * eta, y])
    sol = solve_ivp(_rhs(potential, n), (0.0, float(t_eval[-1])), s0, method="DOP853",
                    t_eval=t_eval, rtol=rtol, atol=atol)
    if sol.status != 0:
        raise RuntimeError(f"characteristic integration failed at eta={eta}: {sol.message}")
    return sol.y.reshape(8, n, -1).transpose(0, 2, 1)  # (8, nt, ny)


def _spline(xk, yk, k=5):
    return make_interp_spline(xk, yk, k=k, axis=0)


DEFAULT_RESOLUTION = {"nt": 8, "nx": 64, "neta": 129, "ny": 256, "fine": 6, "margin": 40}


def _dy(f, dy: float):
    """d/dy along the last axis: 6th-order central differences, 2nd order near the ends."""
    out = np.gradient(f, dy, axis=-1, edge_order=2)
    c = f[..., 6:] - f[..., :-6]
    b = f[..., 5:-1] - f[..., 1:-5]
    a = f[..., 4:-2] - f[..., 2:-4]
    out[..., 3:-3] = (c - 9 * b + 45 * a) / (60 * dy)
    return out


def build_phase(potential, t_max: float, x_range: tuple[float, float], eta_range: tuple[float, float],
                resolution: dict | None = None, tol: float = 1e-7, rtol: float = 1e-11,
                atol: float = 1e-12) -> PhaseTable:
    """Tabulate phi and its derivatives on (t, x, eta) for t in [0, t_max].

    Parameters
    ----------
    potential : callable with ``d1``/``d2`` (e.g. a blown-up potential)
    x_range : the output lattice is ``Grid1D(*x_range, nx)``
    eta_range : frequencies (in units where h multiplies the dual variable)
    resolution : dict overriding ``DEFAULT_RESOLUTION``
    tol : bound on the estimated inversion error of y(x)

    Raises
    ------
    CausticError
        dx/dy vanishes for some characteristic before t_max.
    InversionError
        The spline inversion cannot reach ``tol`` at this resolution.
    """
    res = dict(DEFAULT_RESOLUTION)
    res.update(resolution or {})
    nt, nx, neta, ny, fine, margin = (int(res[k]) for k in ("nt", "nx", "neta", "ny", "fine", "margin"))
    grid = Grid1D(float(x_range[0]), float(x_range[1]), nx)
    xs = grid.x
    x_lo, x_hi = float(x_range[0]), float(x_range[1])
    t_samples = np.linspace(0.0, t_max, nt + 1)
    t_fine = np.linspace(0.0, t_max, nt * fine + 1)
    dstep = 0.02 * t_max / nt  # eikonal finite-difference stencil in t
    stencil = np.array([-2, -1, 1, 2]) * dstep
    fd_w = np.array([1, -8, 8, -1]) / (12 * dstep)
    extra = (t_samples[1:, None] + stencil[None, :]).ravel()
    t_eval = np.unique(np.concatenate([t_fine, extra]))
    i_fine = np.array([int(np.argmin(np.abs(t_eval - t))) for t in t_fine])
    i_samp = np.array([int(np.argmin(np.abs(t_eval - t))) for t in t_samples])
    etas = np.linspace(float(eta_range[0]), float(eta_range[1]), neta)

    shape = (nt + 1, nx, neta)
    out = {k: np.zeros(shape) for k in ("phi", "phi_x", "phi_eta", "phi_etaeta", "phi_xx", "y")}
    eik = np.zeros(shape)
    valid = np.zeros((nt + 1, neta), dtype=bool)
    lag = []
    worst_inv = 0.0
    pad = 0.1 * (x_hi - x_lo)
    for ie, eta in enumerate(etas):
        # straight-line preimage of [x_lo, x_hi] over [0, t_max], widened until it covers
        lo = min(x_lo, x_lo - 2 * eta * t_max) - pad
        hi = max(x_hi, x_hi - 2 * eta * t_max) + pad
        for attempt in range(8):
            y = np.linspace(lo, hi, ny)
            d = _shoot(potential, y, eta, t_eval, rtol, atol)
            if np.any(d[2] <= 0):
                # focusing makes coverage fail too; report the caustic, which is the cause
                it = int(np.nonzero(np.any(d[2] <= 0, axis=1))[0][0])
                raise CausticError(f"caustic: dx/dy <= 0 at t={t_eval[it]:.6g} for eta={eta:.6g}",
                                   float(t_eval[it]), float(eta))
            x_all = d[0]
            need_lo = np.any(x_all[:, margin] > x_lo)
            need_hi = np.any(x_all[:, -1 - margin] < x_hi)
            if need_lo or need_hi:
                w = hi - lo
                lo, hi = lo - (0.5 * w if need_lo else 0), hi + (0.5 * w if need_hi else 0)
                continue
            # trim to the labels that reach the window, keeping `margin` lattice points on each side
            hit = np.nonzero(np.any((x_all >= x_lo) & (x_all <= x_hi), axis=0))[0]
            i0, i1 = int(hit[0]), int(hit[-1])
            if i1 - i0 >= ny - 2 * margin - 4 or attempt == 7:
                break
            step = y[1] - y[0]
            span = (y[i1] - y[i0] + 2 * step) / (1 - 2 * (margin + 2) / (ny - 1))
            mid = 0.5 * (y[i0] + y[i1])
            lo, hi = mid - 0.5 * span, mid + 0.5 * span
        else:
            raise InversionError(f"eta={eta}: characteristics do not cover x-range by t={t_max}")
        Xy = d[2]
        if np.any(Xy <= 0):
            it = int(np.nonzero(np.any(Xy <= 0, axis=1))[0][0])
            raise CausticError(f"caustic: dx/dy <= 0 at t={t_eval[it]:.6g} for eta={eta:.6g}",
                               float(t_eval[it]), float(eta))
        lag.append(_Lagrangian(y, d[0][i_fine], Xy[i_fine], d[3][i_fine]))
        for it, ti in enumerate(i_samp):
            xk = d[0, ti]
            quantities = np.stack([y, d[6, ti], d[1, ti], d[7, ti] - d[1, ti] * d[4, ti],
                                   -d[4, ti] / d[2, ti], d[3, ti] / d[2, ti]], axis=1)
            spl = _spline(xk, quantities)
            vals = spl(xs)
            # inversion error estimate from a half-resolution spline
            coarse = _spline(xk[::2], y[::2])(xs)
            err = float(np.max(np.abs(coarse - vals[:, 0])))
            worst_inv = max(worst_inv, err)
            if err > tol * 64:
                raise InversionError(f"inversion error {err:.3g} at t={t_samples[it]:.4g}, eta={eta:.4g}; "
                                     "increase resolution['ny']")
            for q, key in enumerate(("y", "phi", "phi_x", "phi_eta", "phi_etaeta", "phi_xx")):
                out[key][it, :, ie] = vals[:, q]
            valid[it, ie] = True
            if it == 0:
                continue
            # eikonal residual: phi_t by a 4th-order stencil at fixed x, phi_x from the phi spline
            phi_t = np.zeros(nx)
            for w_, ts in zip(fd_w, t_samples[it] + stencil):
                j = int(np.argmin(np.abs(t_eval - ts)))
                phi_t += w_ * _spline(d[0, j], d[6, j])(xs)
            phi_x = spl.derivative()(xs)[:, 1]
            eik[it, :, ie] = np.abs(phi_t + phi_x**2 + potential(xs))
    t0 = out["phi"][0]
    # the initial phase is x eta by construction; store it exactly
    out["phi"][0] = xs[:, None] * etas[None, :]
    meta = {"resolution": res, "tol": tol, "rtol": rtol, "atol": atol, "inversion_error": worst_inv,
            "initial_phase_error": float(np.max(np.abs(t0 - out["phi"][0]))),
            "eikonal_max": float(eik.max()), "t_max": t_max, "x_range": list(x_range),
            "eta_range": list(eta_range)}
    return PhaseTable(t_samples, grid, etas, out["phi"], out["phi_x"], out["phi_eta"], out["phi_etaeta"],
                      out["phi_xx"], out["y"], valid, eik, getattr(potential, "id", "potential"), meta,
                      t_fine, lag)


def build_amplitude(phase: PhaseTable, K: int = 4, h_eff: float = 1.0) -> AmplitudeTable:
    """Transport recursion B_1..B_K along characteristics, sampled on the phase lattice."""
    if K < 0:
        raise ValueError("K must be >= 0")
    if not phase.lagrangian:
        raise ValueError("phase table carries no characteristic data")
    nt, nx, neta = phase.phi.shape
    B = np.zeros((K + 1, nt, nx, neta), dtype=complex)
    B[0] = 1.0
    tf = phase.t_fine
    fine = (len(tf) - 1) // (nt - 1)
    for ie, L in enumerate(phase.lagrangian):
        phixx = L.Xiy / L.Xy
        prev = np.ones_like(phixx, dtype=complex)
        ylab = phase.y_label[:, :, ie]
        if np.any(ylab < L.y[0]) or np.any(ylab > L.y[-1]):
            bad = np.nonzero(np.any((ylab < L.y[0]) | (ylab > L.y[-1]), axis=1))[0][0]
            raise RuntimeError(f"backward characteristic leaves the table at t={phase.t_samples[bad]:.6g}")
        for j in range(1, K + 1):
            step = L.y[1] - L.y[0]
            bxx = _dy(_dy(prev, step) / L.Xy, step) / L.Xy
            F = -phixx * prev + 1j * h_eff * bxx
            anti = make_interp_spline(tf, F, k=5, axis=0).antiderivative()
            Bj = anti(tf) - anti(0.0)
            for it in range(nt):
                B[j, it, :, ie] = make_interp_spline(L.y, Bj[it * fine], k=7)(ylab[it])
            prev = Bj
    C = []
    ts = phase.t_samples[1:]
    for j in range(K + 1):
        mag = np.max(np.abs(B[j, 1:]), axis=(1, 2))
        C.append(float(np.max(mag / ts**j)))
    return AmplitudeTable(K, B, h_eff, C)


def _data_hat(v0: WaveField, xi: np.ndarray) -> np.ndarray:
    """Exact transform of the grid samples, v^(xi) = dx sum exp(-i x_j xi) v_j, at arbitrary xi."""
    x = v0.grid.x
    return v0.grid.dx * (np.exp(-1j * np.outer(xi, x)) @ v0.values)


def synthesize_hat(phase: PhaseTable, amplitude: AmplitudeTable | None, vhat: np.ndarray, t: float,
                   h_eff: float = 1.0, K: int | None = None, rtol: float = 1e-6,
                   check: bool = True) -> np.ndarray:
    """(2 pi h)^{-1} int e^{i phi/h} B vhat(eta/h) d eta on the table's x-lattice.

    ``vhat`` holds the data transform at xi = eta_samples / h.
    """
    it = phase.t_index(t)
    if not np.all(phase.valid[it]):
        raise ValueError(f"phase table invalid at t={t}")
    etas = phase.eta_samples
    B = np.ones((phase.phi.shape[1], etas.size)) if amplitude is None else amplitude.total(K)[it]
    integrand = np.exp(1j * phase.phi[it] / h_eff) * B * vhat[None, :]
    dE = etas[1] - etas[0]
    w = np.full(etas.size, dE)
    w[0] = w[-1] = 0.5 * dE
    val = integrand @ w / (2 * math.pi * h_eff)
    if check:
        if etas.size % 2 == 0:
            raise QuadratureResolutionError("refinement check needs an odd number of eta samples")
        w2 = np.full(etas.size // 2 + 1, 2 * dE)
        w2[0] = w2[-1] = dE
        coarse = integrand[:, ::2] @ w2 / (2 * math.pi * h_eff)
        scale = max(float(np.max(np.abs(val))), 1e-300)
        diff = float(np.max(np.abs(coarse - val))) / scale
        if diff > rtol:
            raise QuadratureResolutionError(f"eta quadrature changes by {diff:.3g} (> {rtol}) on halving; "
                                            "increase resolution['neta']")
    return val


def synthesize(phase: PhaseTable, amplitude: AmplitudeTable | None, v0: WaveField, t: float,
               h_eff: float = 1.0, K: int | None = None, rtol: float = 1e-6,
               outside_tol: float = 1e-8) -> WaveField:
    """Apply the parametrix at time ``t`` to grid data ``v0``.

    The y-integral is the exact transform of the samples of ``v0``; the
    data must have relative Fourier mass below ``outside_tol`` outside the
    table's frequency range.
    """
    n = v0.grid.N
    xi_fft = 2 * np.pi * np.fft.fftfreq(n, v0.grid.dx)
    pw = np.abs(np.fft.fft(v0.values)) ** 2
    e_lo, e_hi = phase.eta_samples[0], phase.eta_samples[-1]
    outside = (h_eff * xi_fft < e_lo) | (h_eff * xi_fft > e_hi)
    frac = float(np.sqrt(pw[outside].sum() / max(pw.sum(), 1e-300)))
    if frac > outside_tol:
        raise ValueError(f"data has Fourier mass {frac:.3g} outside the table's eta-range")
    vhat = _data_hat(v0, phase.eta_samples / h_eff)
    vals = synthesize_hat(phase, amplitude, vhat, t, h_eff, K, rtol)
    meta = {"source": "parametrix", "K": amplitude.K if (amplitude and K is None) else K, "h_eff": h_eff,
            "potential": phase.potential_id}
    return WaveField(phase.grid, vals, float(t), meta)


def dispersion_measure(phase: PhaseTable, amplitude: AmplitudeTable | None, t_list, h_eff: float = 1.0,
                       y_sample=None, width: float | None = None, rtol: float = 1e-6) -> dict:
    """sup over t of (h t)^{1/2} sup_x |K(t, x, y)| for point-like data at each y.

    The probe is an L^1-normalized Gaussian of width ``width`` (default four
    lattice spacings) multiplied in frequency by the canonical bump
    adapted to the table's eta-range, so the window is 1 on the inner half.
    """
    if width is None:
        width = 4 * phase.grid.dx
    if y_sample is None:
        y_sample = [0.0]
    etas = phase.eta_samples
    e_c = 0.5 * min(-etas[0], etas[-1])
    if e_c <= 0:
        raise ValueError("eta-range must contain 0 in its interior")
    xi = etas / h_eff
    rows = []
    for y0 in y_sample:
        vhat = np.exp(-1j * y0 * xi - 0.5 * (width * xi) ** 2) * bump(etas / e_c)
        for t in t_list:
            if t <= 0:
                raise ValueError("t must be positive")
            w = synthesize_hat(phase, amplitude, vhat, t, h_eff, rtol=rtol)
            rows.append({"t": float(t), "y": float(y0), "sup": float(np.max(np.abs(w))),
                         "constant": float(math.sqrt(h_eff * t) * np.max(np.abs(w)))})
    consts = [r["constant"] for r in rows]
    return {"rows": rows, "max_constant": max(consts), "min_constant": min(consts),
            "free_constant": FREE_DISPERSION_CONSTANT, "width": width, "window_scale": e_c,
            "h_eff": h_eff}


def intertwining_check(phase: PhaseTable, potential, n_samples: int = 20, seed: int = 0) -> dict:
    """Compare phi_x and phi_eta at x(t; y, eta) with independently integrated flow data."""
    from .flow import flow_batch

    rng = np.random.default_rng(seed)
    xs = phase.grid.x
    errs_x, errs_eta = [], []
    it = len(phase.t_samples) - 1
    t = phase.t_samples[it]
    for _ in range(n_samples):
        ie = int(rng.integers(phase.eta_samples.size))
        ix = int(rng.integers(2, xs.size - 2))
        y, eta = phase.y_label[it, ix, ie], phase.eta_samples[ie]
        d = flow_batch([y], [eta], potential, [0.0, t], rtol=1e-12, atol=1e-13)[:, -1, 0]
        errs_x.append(abs(d[0] - xs[ix]))
        errs_eta.append(abs(phase.phi_eta[it, ix, ie] - y))
        errs_x[-1] = max(errs_x[-1], abs(d[1] - phase.phi_x[it, ix, ie]))
    return {"phi_x_error": float(max(errs_x)), "phi_eta_error": float(max(errs_eta)), "t": float(t)}


def phase_bounds(phase: PhaseTable, m: int, delta: float | None = None) -> dict:
    """Constants in |phi_etaeta/(2t) - 1| <= C t and |phi_xx| <= C t x^{2m-2} (|x| <= delta).

    The second bound concerns characteristics that stay comparable to x, so
    it is measured where 4 |eta| t <= |x| (the path then stays inside
    [x/2, 3x/2]); the unrestricted maximum is reported alongside.
    """
    ts = phase.t_samples[1:, None, None]
    xs = phase.grid.x
    if delta is None:
        delta = float(np.max(np.abs(xs)))
    ratio = np.abs(phase.phi_etaeta[1:] / (2 * ts) + 1.0)  # phi_etaeta = -2t(1 + O(t))
    c_eta = float(np.max(ratio / ts))
    half = ts[:, 0, 0] <= 0.5 * ts[-1, 0, 0]
    c_eta_small = float(np.max((ratio / ts)[half])) if np.any(half) else c_eta
    ax = np.abs(xs)[None, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.abs(phase.phi_xx[1:]) / (ts * ax ** (2 * m - 2))
    inside = (ax <= delta) & (ax > 0)
    near = inside & (4 * np.abs(phase.eta_samples)[None, None, :] * ts <= ax)
    near = np.broadcast_to(near, q.shape)
    allq = np.broadcast_to(inside, q.shape)
    return {"C_etaeta": c_eta, "C_etaeta_small_t": c_eta_small,
            "C_xx": float(np.max(q[near])) if np.any(near) else 0.0,
            "C_xx_unrestricted": float(np.max(q[allq])), "delta": delta,
            "sign": "phi_etaeta = -2t(1+O(t)) for phi_t + phi_x^2 + V = 0"}


_TABLE_FIELDS = ("t_samples", "eta_samples", "phi", "phi_x", "phi_eta", "phi_etaeta", "phi_xx", "y_label",
                 "valid", "eikonal_residual")


def save_phase_table(phase: PhaseTable, path: str) -> None:
    """Write the lattice arrays in the shared binary container (Lagrangian data is not stored)."""
    header = {"grid": phase.grid.as_dict(), "potential": phase.potential_id, "meta": phase.meta,
              "fields": list(_TABLE_FIELDS)}
    arrays = [np.asarray(getattr(phase, f), dtype=float) for f in _TABLE_FIELDS]
    write_container(path, "phase-table", header, arrays)


def load_phase_table(path: str) -> PhaseTable:
    header, arrays = read_container(path)
    if header.get("kind") != "phase-table":
        raise ValueError(f"{path} holds a {header.get('kind')!r}, not a phase table")
    d = dict(zip(header["fields"], arrays))
    d["valid"] = d["valid"].astype(bool)
    return PhaseTable(grid=Grid1D(**header["grid"]), potential_id=header["potential"], meta=header["meta"], **d)
