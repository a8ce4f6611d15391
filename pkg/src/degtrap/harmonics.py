"""Zonal spherical harmonics on S^d and their L^q norms.

``Z_k(theta)`` is proportional to the Gegenbauer polynomial
``C_k^{(d-1)/2}(cos theta)`` (``cos(k theta)`` when d = 1) and normalized in
``L^2(S^d)``.  Integrals over the sphere reduce to
``|S^{d-1}| int_{-1}^{1} F(t) (1 - t^2)^{(d-2)/2} dt`` with ``t = cos theta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

__all__ = [
    "ZonalHarmonic",
    "QuadratureError",
    "zonal",
    "make_zonal",
    "sphere_lq_norm",
    "sogge_exponent",
    "sogge_ratio",
    "combination_factor",
    "polar_laplacian_residual",
]


class QuadratureError(RuntimeError):
    pass


def _sphere_area(d: int) -> float:
    """|S^d| = 2 pi^{(d+1)/2} / Gamma((d+1)/2); |S^0| = 2."""
    return 2 * math.pi ** ((d + 1) / 2) / math.gamma((d + 1) / 2)


def _gegenbauer(k: int, a: float, t):
    """C_k^{(a)}(t) by the three-term recurrence (a > 0)."""
    if k == 0:
        return np.ones_like(np.asarray(t, dtype=float))
    return _gegenbauer_pair(k, a, t)[0]


@dataclass(frozen=True)
class ZonalHarmonic:
    k: int
    d: int
    scale: float  # multiplies the raw Gegenbauer/Chebyshev polynomial

    @property
    def eigenvalue(self) -> int:
        return self.k * (self.k + self.d - 1)

    def raw(self, t):
        t = np.asarray(t, dtype=float)
        if self.d == 1:
            return np.cos(self.k * np.arccos(np.clip(t, -1, 1)))
        return _gegenbauer(self.k, 0.5 * (self.d - 1), t)

    def __call__(self, theta):
        return self.scale * self.raw(np.cos(theta))


def _gegenbauer_pair(n: int, lam: float, t):
    """(C_n, C_{n-1}) for the Gegenbauer family (lam > 0)."""
    t = np.asarray(t, dtype=float)
    c_prev, c = np.ones_like(t), 2 * lam * t
    for j in range(2, n + 1):
        c_prev, c = c, (2 * t * (j + lam - 1) * c - (j + 2 * lam - 2) * c_prev) / j
    return c, c_prev


@lru_cache(maxsize=64)
def _nodes(n: int, d: int):
    """Gauss rule for the weight (1 - t^2)^{(d-2)/2} on [-1, 1].

    Starting nodes come from scipy and are polished by Newton steps on the
    Gegenbauer recurrence; weights use w_i ~ 1/((1 - t_i^2) C_n'(t_i)^2)
    normalized to the exact weight integral.
    """
    if d == 1:
        i = np.arange(1, n + 1)
        return np.cos((2 * i - 1) * np.pi / (2 * n)), np.full(n, np.pi / n)
    a = 0.5 * (d - 2)
    lam = a + 0.5
    t = special.roots_legendre(n)[0] if d == 2 else special.roots_jacobi(n, a, a)[0]
    for _ in range(3):
        c, cp = _gegenbauer_pair(n, lam, t)
        dc = (-n * t * c + (n + 2 * lam - 1) * cp) / (1 - t * t)
        t = t - c / dc
    c, cp = _gegenbauer_pair(n, lam, t)
    dc = (-n * t * c + (n + 2 * lam - 1) * cp) / (1 - t * t)
    w = 1.0 / ((1 - t * t) * dc**2)
    total = math.sqrt(math.pi) * math.gamma(a + 1) / math.gamma(a + 1.5)
    return t, w * (total / w.sum())


def _sphere_integral(F, d: int, n0: int, rtol: float = 1e-8, max_doublings: int = 6) -> float:
    """|S^{d-1}| int F(t) w(t) dt by Gauss quadrature, doubled until the change is < rtol."""
    area = _sphere_area(d - 1)
    prev = None
    n = n0
    for _ in range(max_doublings + 1):
        t, w = _nodes(n, d)
        val = area * float(np.dot(w, F(t)))
        if prev is not None and abs(val - prev) <= rtol * abs(val):
            return val
        prev, n = val, 2 * n
    raise QuadratureError(f"sphere quadrature did not converge to {rtol} with {n // 2} nodes")


@lru_cache(maxsize=512)
def make_zonal(k: int, d: int) -> ZonalHarmonic:
    if d < 1 or k < 0:
        raise ValueError("need d >= 1 and k >= 0")
    z = ZonalHarmonic(int(k), int(d), 1.0)
    nrm2 = _sphere_integral(lambda t: z.raw(t) ** 2, d, 4 * (k + 10))
    return ZonalHarmonic(int(k), int(d), 1.0 / math.sqrt(nrm2))


def zonal(k: int, d: int, theta):
    """L^2(S^d)-normalized zonal harmonic of degree ``k`` at polar angle ``theta``."""
    return make_zonal(k, d)(theta)


def sphere_lq_norm(Z: ZonalHarmonic, q: float) -> float:
    """||Z||_{L^q(S^d)} by Gauss quadrature in cos(theta), refined to 1e-8."""
    if q < 2 or math.isinf(q):
        raise ValueError("q must lie in [2, inf)")
    val = _sphere_integral(lambda t: np.abs(Z.scale * Z.raw(t)) ** q, Z.d, 4 * (Z.k + 10))
    return val ** (1.0 / q)


def sogge_exponent(d: int) -> tuple[float, float]:
    """(q, exponent) = (2(d+1)/(d-1), (d-1)/(2(d+1))) for d >= 2."""
    if d < 2:
        raise ValueError("the critical exponent needs d >= 2")
    return 2 * (d + 1) / (d - 1), (d - 1) / (2 * (d + 1))


def sogge_ratio(k: int, d: int, q: float | None = None) -> float:
    """||Z_k||_q / ||Z_k||_2 (the L^2 norm is 1 by construction)."""
    if q is None:
        q = sogge_exponent(d)[0]
    return sphere_lq_norm(make_zonal(k, d), q)


def combination_factor(k: int, n: int) -> tuple[float, bool]:
    """k^{(n-2)/(2n)} and a flag that is False for n = 2 (no gain, value 1)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if n == 2:
        return 1.0, False
    return float(k) ** ((n - 2) / (2 * n)), True


def polar_laplacian_residual(Z: ZonalHarmonic, n_samples: int = 400) -> float:
    """Relative residual of ``Z'' + (d-1) cot(theta) Z' + k(k+d-1) Z`` on interior angles."""
    theta = np.linspace(0, np.pi, n_samples + 2)[1:-1]
    t, s = np.cos(theta), np.sin(theta)
    k, d = Z.k, Z.d
    if d == 1:
        z, dz, d2z = np.cos(k * theta), -k * np.sin(k * theta), -(k**2) * np.cos(k * theta)
    else:
        a = 0.5 * (d - 1)
        # derivative identity d/dt C_k^(a) = 2a C_{k-1}^(a+1), applied twice
        c = _gegenbauer(k, a, t)
        ct = 2 * a * _gegenbauer(k - 1, a + 1, t) if k >= 1 else 0 * t
        ctt = 4 * a * (a + 1) * _gegenbauer(k - 2, a + 2, t) if k >= 2 else 0 * t
        z, dz, d2z = c, -s * ct, s * s * ctt - t * ct
    lap = d2z + (d - 1) * (t / s) * dz
    return float(np.max(np.abs(lap + Z.eigenvalue * z)) / max(Z.eigenvalue * np.max(np.abs(z)), 1e-300))
