"""Model geometry of the warped product R_x x S^{n-1}.

The warp is A(x) = (1 + x^{2m})^{1/(2m)}.  Everything here is a closed-form
function of x built from terms ``c * x**p * r(x)**(-q)`` with r = 1 + x^{2m};
derivatives are obtained by differentiating those terms exactly, so no finite
differences enter the hot path.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

__all__ = [
    "ManifoldParams",
    "ModeContext",
    "warp_A",
    "warp_A_d1",
    "warp_A_d2",
    "subpotential_V1",
    "principal_potential",
    "potential_V",
    "mode_params",
    "rescaled_potential",
    "rescale_field",
    "RescaledPotential",
    "ModelPotential",
    "ConstantPotential",
    "QuadraticPotential",
    "ModePotential",
]


@dataclass(frozen=True)
class ManifoldParams:
    """Degeneracy order ``m`` and manifold dimension ``n``."""

    m: int
    n: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"degeneracy order m must be an integer >= 1, got {self.m}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"dimension n must be an integer >= 2, got {self.n}")

    @property
    def degenerate(self) -> bool:
        """True for m >= 2, where the trapping is degenerate."""
        return self.m >= 2


@dataclass(frozen=True)
class ModeContext:
    k: int
    lambda_sq: int
    h: float


# A term c * x^p * r^(-q), r = 1 + x^(2m).  q may be fractional.
_Term = tuple[Fraction, int, Fraction]


def _d_terms(terms: Sequence[_Term], m: int) -> list[_Term]:
    out: dict[tuple[int, Fraction], Fraction] = {}
    for c, p, q in terms:
        if p != 0:
            key = (p - 1, q)
            out[key] = out.get(key, Fraction(0)) + c * p
        if q != 0:
            key = (p + 2 * m - 1, q + 1)
            out[key] = out.get(key, Fraction(0)) - c * q * 2 * m
    return [(c, p, q) for (p, q), c in sorted(out.items()) if c != 0]


def _eval_terms(terms: Sequence[_Term], x, m: int):
    x = np.asarray(x, dtype=float)
    r = 1.0 + x ** (2 * m)
    lr = np.log(r)
    total = np.zeros_like(x)
    rq: dict[Fraction, np.ndarray] = {}
    xp: dict[int, np.ndarray] = {}
    for c, p, q in terms:
        if p < 0:
            # only reachable with a zero coefficient, which _d_terms drops
            raise ArithmeticError("negative power of x in closed form")
        if q not in rq:
            rq[q] = np.exp(-float(q) * lr)
        if p not in xp:
            xp[p] = x**p
        total = total + float(c) * xp[p] * rq[q]
    return total


_CACHE: dict[tuple[str, int, int], list[_Term]] = {}


def _derivative_terms(base: str, m: int, order: int) -> list[_Term]:
    key = (base, m, order)
    if key in _CACHE:
        return _CACHE[key]
    if order == 0:
        if base == "A":
            terms = [(Fraction(1), 0, Fraction(-1, 2 * m))]
        elif base == "Ainv2":
            terms = [(Fraction(1), 0, Fraction(1, m))]
        elif base == "logA_d1":
            # (log A)' = x^{2m-1} / r
            terms = [(Fraction(1), 2 * m - 1, Fraction(1))]
        else:
            raise KeyError(base)
    else:
        terms = _d_terms(_derivative_terms(base, m, order - 1), m)
    _CACHE[key] = terms
    return terms


def _scalar_or_array(x, value):
    return float(value) if np.ndim(x) == 0 else value


def warp_A(x, p: ManifoldParams):
    """A(x) = (1 + x^{2m})^{1/(2m)}."""
    return _scalar_or_array(x, _eval_terms(_derivative_terms("A", p.m, 0), x, p.m))


def warp_A_d1(x, p: ManifoldParams):
    return _scalar_or_array(x, _eval_terms(_derivative_terms("A", p.m, 1), x, p.m))


def warp_A_d2(x, p: ManifoldParams):
    return _scalar_or_array(x, _eval_terms(_derivative_terms("A", p.m, 2), x, p.m))


def principal_potential(x, p: ManifoldParams, order: int = 0):
    """A^{-2}(x) = (1 + x^{2m})^{-1/m} and its x-derivatives."""
    return _scalar_or_array(x, _eval_terms(_derivative_terms("Ainv2", p.m, order), x, p.m))


def subpotential_V1(x, p: ManifoldParams, order: int = 0):
    """V_1 = (n-1)/2 A''/A + (n-1)(n-3)/4 (A'/A)^2, or its ``order``-th derivative.

    With g = log A this is (n-1)/2 g'' + (n-1)^2/4 (g')^2, which is what is
    differentiated (up to order 2).
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    m, n = p.m, p.n
    g = [_eval_terms(_derivative_terms("logA_d1", m, j), x, m) for j in range(order + 2)]
    # g[j] is the (j+1)-th derivative of log A
    a, b = 0.5 * (n - 1), 0.25 * (n - 1) ** 2
    if order == 0:
        val = a * g[1] + b * g[0] ** 2
    elif order == 1:
        val = a * g[2] + 2 * b * g[0] * g[1]
    else:
        val = a * g[3] + 2 * b * (g[1] ** 2 + g[0] * g[2])
    return _scalar_or_array(x, val)


def potential_V(x, h: float, p: ManifoldParams, order: int = 0):
    """V(x) = A^{-2}(x) + h^2 V_1(x); h = 0 gives the principal part alone."""
    if h < 0:
        raise ValueError("h must be nonnegative")
    return principal_potential(x, p, order) + h**2 * subpotential_V1(x, p, order)


def mode_params(k: int, p: ManifoldParams) -> ModeContext:
    """Spherical-harmonic order ``k`` -> lambda^2 = k(k+n-2), h = lambda^{-1}."""
    if int(k) != k or k < 0:
        raise ValueError(f"k must be a nonnegative integer, got {k}")
    k = int(k)
    if k == 0:
        raise ValueError("zero mode has no semiclassical parameter")
    lam_sq = k * (k + p.n - 2)
    return ModeContext(k=k, lambda_sq=lam_sq, h=float(lam_sq) ** -0.5)


def rescaled_potential(x, h: float, p: ManifoldParams, order: int = 0, include_v1: bool = True):
    """Blown-up potential h^{-2m/(m+1)} V(h^{1/(m+1)} x; h) (and x-derivatives)."""
    if not 0 < h <= 1:
        raise ValueError("h must lie in (0, 1]")
    m = p.m
    g = h ** (1.0 / (m + 1))
    pref = h ** (-2.0 * m / (m + 1)) * g**order
    xs = g * np.asarray(x, dtype=float)
    val = principal_potential(xs, p, order)
    if include_v1:
        val = val + h**2 * subpotential_V1(xs, p, order)
    return _scalar_or_array(x, pref * val)


def rescale_field(values, grid, h: float, p: ManifoldParams, direction: str = "forward",
                  target=None, time: float | None = None):
    """Apply the blow-up map T_h u(x) = h^{-1/(m+1)} u(h^{-1/(m+1)} x) or its inverse.

    Parameters
    ----------
    values : complex array sampled on ``grid``
    grid : Grid1D of the input samples
    h : semiclassical parameter in (0, 1]
    direction : "forward" (T_h) or "inverse" (T_h^{-1})
    target : Grid1D for the output; defaults to ``grid`` scaled by the map
    time : optional time of the input; mapped to h^{(1-m)/(m+1)} t (forward)

    Returns
    -------
    (values, target_grid, time, meta) where ``meta["interpolation"]`` records
    the scheme actually used ("identity", "spectral" or "cubic").
    """
    from .propagator import Grid1D  # local import, propagator depends on geometry

    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    m = p.m
    s = h ** (1.0 / (m + 1))
    # forward: output(x) = s^{-1} input(x / s)
    amp, stretch = (1.0 / s, s) if direction == "forward" else (s, 1.0 / s)
    tscale = h ** ((m - 1.0) / (m + 1))
    new_time = None
    if time is not None:
        new_time = time / tscale if direction == "forward" else time * tscale
    if target is None:
        target = Grid1D(grid.x_min * stretch, grid.x_max * stretch, grid.N)
    values = np.asarray(values, dtype=complex)
    src_x = target.x / stretch
    lo, hi = grid.x_min, grid.x_max
    outside = (src_x < lo - 1e-12) | (src_x > hi + 1e-12)
    if np.any(outside):
        # allowed only if the field is negligible there
        raise ValueError("rescaled support exceeds the target grid")
    if np.isclose(stretch, 1.0, rtol=0, atol=1e-15) and np.allclose(target.x, grid.x, rtol=0, atol=1e-12):
        out, scheme = values.copy(), "identity"
    else:
        out, scheme = _interp_periodic(values, grid, src_x)
    return amp * out, target, new_time, {"interpolation": scheme, "direction": direction, "h": h}


def _interp_periodic(values, grid, xq):
    """Band-limited trigonometric interpolation for modest sizes, cubic otherwise."""
    N = grid.N
    if N * len(xq) > 2**22:
        from scipy.interpolate import CubicSpline

        xs = np.append(grid.x, grid.x_max)
        ys = np.append(values, values[0])
        return CubicSpline(xs, ys, bc_type="periodic")(xq), "cubic"
    xi = 2 * np.pi * np.fft.fftfreq(N, d=grid.dx)
    c = np.fft.fft(values) / N
    s = np.asarray(xq) - grid.x_min
    ny = N // 2
    keep = np.arange(N) != ny
    val = np.exp(1j * np.outer(s, xi[keep])) @ c[keep]
    # Nyquist mode split into +/- frequencies: contributes a cosine
    val = val + c[ny] * np.cos(xi[ny] * s)
    return val, "spectral"


class _PotentialBase:
    """Callable potential with closed-form first and second derivatives."""

    id = "potential"

    def __call__(self, x):
        return self.value(x)

    def value(self, x):
        raise NotImplementedError

    def d1(self, x):
        raise NotImplementedError

    def d2(self, x):
        raise NotImplementedError

    def derivs(self, x):
        """(value, d1, d2) in one call; subclasses share work where they can."""
        return self.value(x), self.d1(x), self.d2(x)


class RescaledPotential(_PotentialBase):
    """h^{-2m/(m+1)} V(h^{1/(m+1)} x) minus an optional constant ``shift``.

    ``shift="top"`` subtracts the barrier height so values stay O(1) near the
    trap; it only changes the global phase of solutions.
    """

    def __init__(self, h: float, p: ManifoldParams, include_v1: bool = True, shift=0.0):
        self.h, self.p, self.include_v1 = h, p, include_v1
        if shift == "top":
            shift = rescaled_potential(0.0, h, p, 0, include_v1)
        self.shift = float(shift)
        self.id = f"rescaled(m={p.m},n={p.n},h={h:.6g},v1={int(include_v1)},shift={self.shift:.6g})"

    def value(self, x):
        return rescaled_potential(x, self.h, self.p, 0, self.include_v1) - self.shift

    def d1(self, x):
        return rescaled_potential(x, self.h, self.p, 1, self.include_v1)

    def d2(self, x):
        return rescaled_potential(x, self.h, self.p, 2, self.include_v1)

    def derivs(self, x):
        if self.include_v1:
            return super().derivs(x)
        # closed form of c (1 + (g x)^{2m})^{-1/m} and two derivatives with shared powers
        m, g = self.p.m, self.h ** (1.0 / (self.p.m + 1))
        c = self.h ** (-2.0 * m / (m + 1))
        z = g * np.asarray(x, dtype=float)
        z2 = z ** (2 * m - 2)
        r = 1.0 + z2 * z * z
        s = r ** (-1.0 / m)
        sr = s / r
        d1 = -2.0 * z2 * z * sr
        d2 = sr * (-2.0 * (2 * m - 1) * z2 + 4.0 * (m + 1) * z2 * z2 * z * z / r)
        return c * s - self.shift, c * g * d1, c * g * g * d2


class ModelPotential(_PotentialBase):
    """Barrier-top model c - x^{2m}/m (the h -> 0 limit of the blown-up potential)."""

    def __init__(self, m: int, top: float = 0.0):
        self.m, self.top = m, float(top)
        self.id = f"model(m={m},top={top:.6g})"

    def value(self, x):
        return self.top - np.asarray(x, dtype=float) ** (2 * self.m) / self.m

    def d1(self, x):
        return -2.0 * np.asarray(x, dtype=float) ** (2 * self.m - 1)

    def d2(self, x):
        return -2.0 * (2 * self.m - 1) * np.asarray(x, dtype=float) ** (2 * self.m - 2)


class ConstantPotential(_PotentialBase):
    def __init__(self, c: float = 0.0):
        self.c = float(c)
        self.id = f"constant({self.c:.6g})"

    def value(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.c)

    def d1(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def d2(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


class QuadraticPotential(_PotentialBase):
    """c * x^2 (c > 0 harmonic oscillator, c < 0 inverted barrier)."""

    def __init__(self, c: float = 1.0):
        self.c = float(c)
        self.id = f"quadratic({self.c:.6g})"

    def value(self, x):
        return self.c * np.asarray(x, dtype=float) ** 2

    def d1(self, x):
        return 2 * self.c * np.asarray(x, dtype=float)

    def d2(self, x):
        return np.full_like(np.asarray(x, dtype=float), 2 * self.c)


class ModePotential(_PotentialBase):
    """k(k+n-2) A^{-2}(x) + V_1(x) - shift, the potential of the mode operator P_k."""

    def __init__(self, ctx: ModeContext, p: ManifoldParams, include_v1: bool = True, shift=0.0):
        self.ctx, self.p, self.include_v1 = ctx, p, include_v1
        self.shift = float(ctx.lambda_sq if shift == "top" else shift)
        self.id = f"mode(k={ctx.k},m={p.m},n={p.n},v1={int(include_v1)},shift={self.shift:.6g})"

    def _val(self, x, order):
        v = self.ctx.lambda_sq * principal_potential(x, self.p, order)
        if self.include_v1:
            v = v + subpotential_V1(x, self.p, order)
        return v

    def value(self, x):
        return self._val(x, 0) - self.shift

    def d1(self, x):
        return self._val(x, 1)

    def d2(self, x):
        return self._val(x, 2)
