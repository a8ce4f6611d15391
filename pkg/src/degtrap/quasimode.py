"""Complex-phase quasimode at the degenerate barrier top.

Model operator ``P = (hD)^2 - x^{2m}/m`` with ``hD = -i h d_x``.  For complex
energy ``E`` with ``Im E > 0`` the phase

    phi(x) = int_0^x (E + y^{2m}/m)^{1/2} dy      (principal root)

gives ``u = (phi')^{-1/2} exp(i phi/h)`` with ``(hD)^2 u = (phi')^2 u + f u``.
The quasimode is ``u~ = chi(x/gamma) u`` with ``gamma = h^{1/(m+1)}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .geometry import ManifoldParams, ModeContext, ModePotential
from .propagator import Grid1D, WaveField, bump, bump_d1, bump_d2, lq_norm

__all__ = [
    "QuasimodeSpec",
    "GroundState",
    "ResolutionError",
    "ground_state",
    "complex_phase",
    "phase_derivatives",
    "remainder_f",
    "build_quasimode",
    "residual",
    "quasi_eigenvalue",
    "quasimode_residual_full",
    "quasimode_grid",
    "ground_state_grid",
    "phase_lemma_constants",
]

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


class ResolutionError(ValueError):
    """Grid too coarse for the oscillation of the quasimode."""


@dataclass(frozen=True)
class QuasimodeSpec:
    """Parameters of the quasimode; ``E0 = (alpha + i mu) h^{2m/(m+1)}``."""

    m: int
    h: float
    alpha: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be an integer >= 1")
        if not 0 < self.h < 1:
            raise ValueError("h must lie in (0, 1)")
        if self.alpha <= 0 or self.mu <= 0:
            raise ValueError("alpha and mu must be positive")

    @property
    def gamma(self) -> float:
        return self.h ** (1.0 / (self.m + 1))

    @property
    def E0(self) -> complex:
        return complex(self.alpha, self.mu) * self.h ** (2.0 * self.m / (self.m + 1))

    @property
    def degenerate(self) -> bool:
        return self.m >= 2


@dataclass(frozen=True)
class GroundState:
    m: int
    lambda0: float
    samples: WaveField
    residual: float
    refinement_change: float


def _spectral_d2(values: np.ndarray, grid: Grid1D) -> np.ndarray:
    return np.fft.ifft(-(grid.xi**2) * np.fft.fft(values))


def _ground_state_dense(m: int, grid: Grid1D):
    N = grid.N
    # spectral second-derivative matrix: columns are D2 applied to unit vectors
    D2 = np.real(np.fft.ifft(-(grid.xi**2)[:, None] * np.fft.fft(np.eye(N), axis=0), axis=0))
    H = -D2 + np.diag(grid.x ** (2 * m))
    H = 0.5 * (H + H.T)
    w, v = np.linalg.eigh(H)
    return w[0], v[:, 0]


def ground_state(m: int, grid: Grid1D | None = None, tol: float = 1e-12) -> GroundState:
    """Lowest eigenpair of ``-d^2 + x^{2m}`` by Fourier collocation.

    The eigenvalue is cross-checked on a grid with twice the points (spectral
    refinement); the change is reported.  Raises ``ValueError`` ("enlarge
    domain") when the eigenfunction is not below ``tol`` of its peak at the
    boundary.
    """
    if grid is None:
        # default domain: enlarge until the boundary amplitude is negligible
        grid = ground_state_grid(m)
        for _ in range(6):
            lam, v = _ground_state_dense(m, grid)
            edge = max(abs(v[0]), abs(v[-1]), abs(v[1]))
            if edge <= tol * np.max(np.abs(v)):
                break
            grid = Grid1D.symmetric(1.5 * grid.x_max, 2 * grid.N if grid.N < 512 else grid.N)
    lam, v = _ground_state_dense(m, grid)
    v = v * np.sign(v[grid.N // 2])
    peak = np.max(np.abs(v))
    edge = max(abs(v[0]), abs(v[-1]), abs(v[1]))
    if edge > tol * peak:
        raise ValueError(f"enlarge domain: boundary amplitude {edge / peak:.2e} of peak exceeds {tol:g}")
    fine = Grid1D(grid.x_min, grid.x_max, 2 * grid.N)
    lam_fine, _ = _ground_state_dense(m, fine) if fine.N <= 1024 else (lam, None)
    v = v / math.sqrt(grid.dx * np.sum(v**2))
    res = -_spectral_d2(v, grid).real + (grid.x ** (2 * m) - lam) * v
    rel = math.sqrt(grid.dx * np.sum(res**2))
    field = WaveField(grid, v.astype(complex), 0.0, {"data": "ground_state", "m": m, "lambda0": lam})
    return GroundState(m=m, lambda0=float(lam), samples=field, residual=rel,
                       refinement_change=float(abs(lam_fine - lam)))


def ground_state_grid(m: int, N: int = 256) -> Grid1D:
    """Symmetric domain [-L, L], L = max(8, 4 lambda^{1/(2m)}) with a WKB estimate of lambda."""
    lam_est = (1.0 + m) ** (2.0 * m / (m + 1))  # crude upper estimate, monotone in m
    L = max(8.0, 4.0 * lam_est ** (1.0 / (2 * m)))
    return Grid1D.symmetric(L, N)


def _check_E(E: complex):
    if not np.imag(E) > 0:
        raise ValueError(f"Im E must be positive for the branch to be defined, got E={E}")


def phase_derivatives(x, E: complex, m: int):
    """Return (phi', phi'', phi''') at ``x`` from the closed forms."""
    _check_E(E)
    x = np.asarray(x, dtype=float)
    x2m = x ** (2 * m)
    d1 = np.sqrt(E + x2m / m)
    d2 = x ** (2 * m - 1) / d1
    d3 = ((1.0 - 1.0 / m) * x ** (4 * m - 2) + E * (2 * m - 1) * x ** (2 * m - 2)) / d1**3
    return d1, d2, d3


def _phase_panels(xabs_sorted: np.ndarray, E: complex, m: int) -> np.ndarray:
    rho = (m * abs(E)) ** (1.0 / (2 * m))
    xmax = xabs_sorted[-1] if len(xabs_sorted) else 0.0
    mesh = [0.0]
    while mesh[-1] < xmax:
        mesh.append(mesh[-1] + 0.25 * max(rho, mesh[-1]))
    pts = np.union1d(np.array(mesh), xabs_sorted)
    a, b = pts[:-1], pts[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    nodes = mid[:, None] + half[:, None] * _GL_X[None, :]
    vals = np.sqrt(E + nodes ** (2 * m) / m)
    panel = half * (vals @ _GL_W)
    cum = np.concatenate([[0.0], np.cumsum(panel)])
    return np.searchsorted(pts, xabs_sorted), cum


def complex_phase(x, E: complex, m: int, derivatives: bool = False):
    """phi(x) = int_0^x (E + y^{2m}/m)^{1/2} dy on the principal branch.

    Scalars use adaptive quadrature; arrays use composite 16-point
    Gauss-Legendre panels refined near the branch-point scale
    ``(m|E|)^{1/(2m)}``.  With ``derivatives=True`` returns
    ``(phi, phi', phi'', phi''')``.

    Raises
    ------
    ValueError
        if ``Im E <= 0``.
    """
    _check_E(E)
    if np.ndim(x) == 0:
        xf = float(x)
        # integrate over [0, |x|]: quad with reversed limits and complex_func loses the sign
        val, _ = integrate.quad(lambda y: np.sqrt(E + y ** (2 * m) / m), 0.0, abs(xf),
                                complex_func=True, epsabs=1e-15, epsrel=1e-13, limit=200)
        phi = math.copysign(1.0, xf) * complex(val)
    else:
        xa = np.asarray(x, dtype=float)
        xabs = np.abs(xa)
        uniq, inv = np.unique(xabs, return_inverse=True)
        idx, cum = _phase_panels(uniq, E, m)
        phi = cum[idx][inv].reshape(xa.shape) * np.sign(xa)
    if not derivatives:
        return phi
    return (phi, *phase_derivatives(x, E, m))


def remainder_f(x, E: complex, m: int, h: float):
    """f with ``(hD)^2 u = (phi')^2 u + f u``:
    ``f = -h^2 x^{2m-2} ((1/4 + 1/(2m)) x^{2m} - (m - 1/2) E) / (phi')^4``."""
    x = np.asarray(x, dtype=float)
    d1 = np.sqrt(E + x ** (2 * m) / m)
    return -(h**2) * x ** (2 * m - 2) * ((0.25 + 0.5 / m) * x ** (2 * m) - (m - 0.5) * E) / d1**4


def quasimode_grid(spec: QuasimodeSpec, N: int = 1024, half_width: float = 4.0) -> Grid1D:
    """Grid [-half_width*gamma, half_width*gamma] with N points."""
    return Grid1D.symmetric(half_width * spec.gamma, N)


def _resolution(spec: QuasimodeSpec, grid: Grid1D) -> float:
    xs = min(2 * spec.gamma, max(abs(grid.x_min), abs(grid.x_max)))
    return grid.dx * float(np.abs(np.sqrt(spec.E0 + xs ** (2 * spec.m) / spec.m))) / spec.h


def _check_grid(spec: QuasimodeSpec, grid: Grid1D):
    r = _resolution(spec, grid)
    if r > math.pi / 4:
        need = grid.N * r / (math.pi / 4)
        N2 = 1 << max(4, math.ceil(math.log2(need)))
        raise ResolutionError(
            f"grid too coarse: dx*max|phi'|/h = {r:.3g} > pi/4; need N >= {N2} on this interval"
        )
    if grid.x_min > -2 * spec.gamma or grid.x_max < 2 * spec.gamma:
        raise ValueError("grid must contain the cutoff support [-2 gamma, 2 gamma]")


def _profile(spec: QuasimodeSpec, x):
    m, h, E = spec.m, spec.h, spec.E0
    phi, d1, d2, _ = complex_phase(x, E, m, derivatives=True)
    u = d1 ** -0.5 * np.exp(1j * phi / h)
    return phi, d1, d2, u


def build_quasimode(spec: QuasimodeSpec, grid: Grid1D | None = None) -> WaveField:
    """``u~ = chi(x/gamma) (phi')^{-1/2} exp(i phi/h)``, zero for |x| >= 2 gamma."""
    if grid is None:
        grid = quasimode_grid(spec)
    _check_grid(spec, grid)
    x = grid.x
    chi = bump(x / spec.gamma)
    vals = np.zeros(grid.N, dtype=complex)
    supp = chi > 0
    _, _, _, u = _profile(spec, x[supp])
    vals[supp] = chi[supp] * u
    meta = {"data": "quasimode", "m": spec.m, "h": spec.h, "alpha": spec.alpha, "mu": spec.mu,
            "gamma": spec.gamma, "E0": [spec.E0.real, spec.E0.imag], "resolution": _resolution(spec, grid)}
    return WaveField(grid, vals, 0.0, meta)


def residual(spec: QuasimodeSpec, grid: Grid1D | None = None) -> dict:
    """Split ``R = ((hD)^2 - x^{2m}/m - E0) u~`` into the f-term and the commutator.

    Returns a dict with ``R_norm``, ``u_norm``, ``relative`` (= R_norm/u_norm),
    ``f_term_norm``, ``f_sup`` (sup of |f| on the support),
    ``commutator_norm`` and ``spectral_check`` (relative difference between
    the closed-form R and a Fourier evaluation of the operator).  The
    canonical bump's second derivative jumps at |s| = 1, so the Fourier
    evaluation converges only like N^{-1/2}; the closed form is exact.
    """
    if grid is None:
        grid = quasimode_grid(spec)
    _check_grid(spec, grid)
    m, h, E, g = spec.m, spec.h, spec.E0, spec.gamma
    x = grid.x
    s = x / g
    supp = np.abs(s) < 2
    xs = x[supp]
    _, d1, d2, u = _profile(spec, xs)
    chi, chi1, chi2 = bump(s[supp]), bump_d1(s[supp]) / g, bump_d2(s[supp]) / g**2
    f = remainder_f(xs, E, m, h)
    ux = (1j * d1 / h - 0.5 * d2 / d1) * u
    f_term = np.zeros(grid.N, complex)
    comm = np.zeros(grid.N, complex)
    f_term[supp] = chi * f * u
    # [(hD)^2, chi] u = -h^2 (chi'' u + 2 chi' u')
    comm[supp] = -(h**2) * (chi2 * u + 2 * chi1 * ux)
    R = f_term + comm
    ut = build_quasimode(spec, grid)
    norm = lambda v: lq_norm(WaveField(grid, v), 2)
    spec_R = -(h**2) * _spectral_d2(ut.values, grid) - (x ** (2 * m) / m + E) * ut.values
    u_norm = ut.norm(2)
    return {
        "m": m, "h": h, "gamma": g,
        "R_norm": norm(R), "u_norm": u_norm, "relative": norm(R) / u_norm,
        "f_term_norm": norm(f_term), "f_sup": float(np.max(np.abs(f))),
        "commutator_norm": norm(comm),
        "spectral_check": norm(spec_R - R) / max(norm(R), 1e-300),
    }


def quasi_eigenvalue(ctx: ModeContext, spec: QuasimodeSpec, p: ManifoldParams | None = None,
                     rtol: float = 1e-12) -> dict:
    """tau = k(k+n-2) (1 + E0), the complex frequency of the mode-form ansatz.

    Report keys: ``tau``, ``im_ratio`` = Im tau / (mu k^{2/(m+1)}),
    ``re_form`` = k(k+n-2)(1 + alpha h^{2m/(m+1)}), ``scaling_defect`` =
    |tau h^2 - (1 + E0)|.
    """
    if abs(spec.h - ctx.h) > rtol * ctx.h:
        raise ValueError(f"quasimode h={spec.h} does not match the mode h={ctx.h}")
    if p is not None and p.m != spec.m:
        raise ValueError("degeneracy order of the quasimode and the manifold differ")
    lam = ctx.lambda_sq
    tau = lam * (1 + spec.E0)
    m = spec.m
    return {
        "tau": tau,
        "im_ratio": tau.imag / (spec.mu * ctx.k ** (2.0 / (m + 1))),
        "re_form": lam * (1 + spec.alpha * spec.h ** (2.0 * m / (m + 1))),
        "scaling_defect": abs(tau * ctx.h**2 - (1 + spec.E0)),
    }


def quasimode_residual_full(ctx: ModeContext, spec: QuasimodeSpec, p: ManifoldParams,
                            grid: Grid1D | None = None) -> dict:
    """Residual of the quasimode for the true mode operator.

    ``P_k = -d^2 + k(k+n-2) A^{-2} + V_1``; reports
    ``relative = ||(P_k - tau) u~|| / (k(k+n-2) ||u~||)`` together with the
    model-vs-true potential gap on the support and the V_1 contribution.
    """
    tau = quasi_eigenvalue(ctx, spec, p)["tau"]
    ut = build_quasimode(spec, grid)
    grid = ut.grid
    x = grid.x
    pot = ModePotential(ctx, p, include_v1=True)
    Pu = -_spectral_d2(ut.values, grid) + pot(x) * ut.values
    res = Pu - tau * ut.values
    lam = ctx.lambda_sq
    u_norm = ut.norm(2)
    norm = lambda v: lq_norm(WaveField(grid, v), 2)
    supp = np.abs(x) <= 2 * spec.gamma
    from .geometry import principal_potential, subpotential_V1

    gap = principal_potential(x[supp], p) - (1 - x[supp] ** (2 * p.m) / p.m)
    v1u = subpotential_V1(x, p) * ut.values
    return {
        "k": ctx.k, "h": ctx.h, "tau": [tau.real, tau.imag],
        "relative": norm(res) / (lam * u_norm),
        "model_gap_sup": float(np.max(np.abs(gap))),
        "v1_relative": norm(v1u) / (lam * u_norm),
    }


def phase_lemma_constants(spec: QuasimodeSpec, n: int = 4001) -> dict:
    """Measured constants of the phase bounds on |x| <= 2 gamma.

    ``C_im`` = sup |Im phi| / scale where scale is h for m >= 2 and
    h (1 + log(2 gamma / h^{1/2})) for m = 1 (the harmonic case, outside the
    degenerate regime).  ``C_comp`` is the smallest C with
    |phi'| / sqrt(h^{2m/(m+1)} + x^{2m}) in [1/C, C].  ``C_amp`` does the
    same for |u| |phi'|^{1/2} on |x| <= gamma.
    """
    m, h, g, E = spec.m, spec.h, spec.gamma, spec.E0
    x = np.linspace(-2 * g, 2 * g, n)
    phi, d1, _, _ = complex_phase(x, E, m, derivatives=True)
    scale = h if m >= 2 else h * (1 + math.log(2 * g / math.sqrt(h)))
    ratio = np.abs(d1) / np.sqrt(h ** (2.0 * m / (m + 1)) + x ** (2 * m))
    inner = np.abs(x) <= g
    amp = np.exp(-np.imag(phi[inner]) / h)  # |u| |phi'|^{1/2} = |exp(i phi / h)|
    return {
        "m": m, "h": h, "C_im": float(np.max(np.abs(np.imag(phi)))) / scale,
        "C_comp": float(max(ratio.max(), 1 / ratio.min())),
        "C_amp": float(max(amp.max(), 1 / amp.min())),
        "degenerate": spec.degenerate,
    }
