import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from degtrap.geometry import (
    ConstantPotential,
    ManifoldParams,
    ModePotential,
    RescaledPotential,
    mode_params,
    potential_V,
    principal_potential,
    rescale_field,
    rescaled_potential,
    subpotential_V1,
    warp_A,
    warp_A_d1,
    warp_A_d2,
)
from degtrap.propagator import Grid1D


def _sympy_v1(m, n, x0):
    x = sp.symbols("x", real=True)
    A = (1 + x ** (2 * m)) ** sp.Rational(1, 2 * m)
    V1 = sp.Rational(n - 1, 2) * sp.diff(A, x, 2) / A + sp.Rational((n - 1) * (n - 3), 4) * sp.diff(A, x) ** 2 / A**2
    return float(V1.subs(x, sp.Rational(x0)).evalf(30))


class TestManifoldParams:
    def test_rejects_m0(self):
        with pytest.raises(ValueError):
            ManifoldParams(0, 3)

    def test_rejects_n1(self):
        with pytest.raises(ValueError):
            ManifoldParams(2, 1)

    def test_regime_flag(self):
        assert ManifoldParams(2, 3).degenerate
        assert not ManifoldParams(1, 3).degenerate


class TestWarp:
    def test_origin(self):
        for m in (1, 2, 3, 5):
            assert warp_A(0.0, ManifoldParams(m, 3)) == 1.0

    def test_m2_at_one(self):
        assert warp_A(1.0, ManifoldParams(2, 3)) == pytest.approx(2 ** 0.25, abs=1e-12)
        assert warp_A(1.0, ManifoldParams(2, 3)) == pytest.approx(1.189207, abs=1e-6)

    def test_asymptotically_euclidean(self):
        r = warp_A(100.0, ManifoldParams(2, 3)) / 100.0
        assert 1.0 <= r <= 1.0 + 1e-7

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_derivatives_match_sympy(self, m):
        x = sp.symbols("x", real=True)
        A = (1 + x ** (2 * m)) ** sp.Rational(1, 2 * m)
        p = ManifoldParams(m, 3)
        for x0 in (-1.3, -0.4, 0.2, 0.7, 2.5):
            xr = sp.Rational(x0)
            assert warp_A_d1(x0, p) == pytest.approx(float(sp.diff(A, x).subs(x, xr)), rel=1e-12, abs=1e-14)
            assert warp_A_d2(x0, p) == pytest.approx(float(sp.diff(A, x, 2).subs(x, xr)), rel=1e-12, abs=1e-14)

    def test_fd_convergence_order(self):
        p = ManifoldParams(2, 3)
        x0 = 0.8
        errs = []
        steps = [1e-2 / 2**k for k in range(4)]
        for d in steps:
            fd = (warp_A(x0 + d, p) - warp_A(x0 - d, p)) / (2 * d)
            errs.append(abs(fd - warp_A_d1(x0, p)))
        orders = np.diff(np.log(errs)) / np.diff(np.log(steps))
        assert np.all(orders >= 1.9)


class TestSubpotential:
    def test_origin_vanishes(self):
        for m in (2, 3):
            assert subpotential_V1(0.0, ManifoldParams(m, 4)) == pytest.approx(0.0, abs=1e-15)

    def test_n3_only_second_derivative_term(self):
        p = ManifoldParams(2, 3)
        for x0 in (0.3, 1.1, -2.0):
            assert subpotential_V1(x0, p) == pytest.approx(warp_A_d2(x0, p) / warp_A(x0, p), rel=1e-13)

    def test_matches_sympy_m2_n4(self):
        assert subpotential_V1(0.5, ManifoldParams(2, 4)) == pytest.approx(_sympy_v1(2, 4, "1/2"), abs=1e-12)

    @pytest.mark.parametrize("m,n", [(1, 5), (3, 3), (3, 6)])
    def test_matches_sympy_other(self, m, n):
        assert subpotential_V1(0.75, ManifoldParams(m, n)) == pytest.approx(_sympy_v1(m, n, "3/4"), abs=1e-12)

    def test_derivatives_fd(self):
        p = ManifoldParams(2, 4)
        x0, d = 0.6, 1e-5
        fd1 = (subpotential_V1(x0 + d, p) - subpotential_V1(x0 - d, p)) / (2 * d)
        fd2 = (subpotential_V1(x0 + d, p, 1) - subpotential_V1(x0 - d, p, 1)) / (2 * d)
        assert subpotential_V1(x0, p, 1) == pytest.approx(fd1, rel=1e-7)
        assert subpotential_V1(x0, p, 2) == pytest.approx(fd2, rel=1e-7)


class TestPotential:
    def test_top_is_one(self):
        for m in (2, 3):
            assert potential_V(0.0, 0.1, ManifoldParams(m, 4)) == pytest.approx(1.0, abs=1e-15)

    def test_small_x_expansion(self):
        p = ManifoldParams(2, 3)
        h = 1e-3
        x = np.array([0.05, 0.1, 0.2])
        dev = potential_V(x, h, p) - (1 - x**4 / 2)
        bound = 2 * x**8 + 10 * h**2 * x**2
        assert np.all(np.abs(dev) <= bound)

    def test_inverse_square_decay(self):
        v = potential_V(10.0, 0.0, ManifoldParams(2, 3))
        assert 0.9 <= 100 * v <= 1.1

    @given(st.floats(-50, 50, allow_nan=False), st.integers(1, 4), st.integers(2, 6))
    @settings(max_examples=60, deadline=None)
    def test_even(self, x, m, n):
        p = ManifoldParams(m, n)
        assert potential_V(x, 0.05, p) == pytest.approx(potential_V(-x, 0.05, p), rel=1e-14, abs=1e-300)

    def test_principal_strict_max_and_monotone(self):
        p = ManifoldParams(2, 3)
        x = np.linspace(0, 20, 200001)
        v = principal_potential(x, p)
        assert np.argmax(v) == 0 and v[0] == 1.0
        assert np.all(np.diff(v[1:]) < 0)

    def test_h_negative_rejected(self):
        with pytest.raises(ValueError):
            potential_V(0.0, -0.1, ManifoldParams(2, 3))


class TestModeParams:
    @pytest.mark.parametrize("k,n,lam", [(1, 3, 2), (3, 4, 15), (10, 2, 100)])
    def test_lambda(self, k, n, lam):
        ctx = mode_params(k, ManifoldParams(2, n))
        assert ctx.lambda_sq == lam
        assert ctx.h**2 * ctx.lambda_sq == pytest.approx(1.0, abs=1e-15)

    def test_h_value(self):
        assert mode_params(10, ManifoldParams(2, 2)).h == pytest.approx(0.1, abs=1e-15)

    def test_zero_mode_rejected(self):
        with pytest.raises(ValueError, match="zero mode"):
            mode_params(0, ManifoldParams(2, 3))


class TestRescaled:
    def test_identity(self):
        p = ManifoldParams(2, 4)
        x = np.linspace(-3, 3, 41)
        for h in (1e-3, 0.1, 0.5):
            lhs = rescaled_potential(x, h, p) * h ** (4 / 3)
            rhs = potential_V(h ** (1 / 3) * x, h, p)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-14, atol=1e-15)

    def test_h_one(self):
        p = ManifoldParams(3, 3)
        x = np.linspace(-2, 2, 11)
        np.testing.assert_allclose(rescaled_potential(x, 1.0, p), potential_V(x, 1.0, p), rtol=1e-15)

    @pytest.mark.parametrize("m", [2, 3])
    def test_small_h_limit(self, m):
        # Taylor remainder of (1+z)^{-1/m} at z = x^{2m}: second-order term with coefficient (m+1)/(2m^2)
        p = ManifoldParams(m, 3)
        x = np.linspace(-2, 2, 81)
        errs = []
        hs = [1e-4, 1e-5, 1e-6]
        for h in hs:
            d = rescaled_potential(x, h, p, include_v1=False) - rescaled_potential(0.0, h, p, include_v1=False)
            errs.append(np.max(np.abs(d + x ** (2 * m) / m)))
        a = 2 * m / (m + 1)
        for h, e in zip(hs, errs):
            assert e <= (m + 1) / (2 * m**2) * 2 ** (4 * m) * h**a * 1.01
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert slope == pytest.approx(a, rel=0.02)

    def test_potential_object_fast_path(self):
        p = ManifoldParams(2, 3)
        h = 1e-2
        fast = RescaledPotential(h, p, include_v1=False, shift="top")
        x = np.linspace(-5, 5, 101)
        v, d1, d2 = fast.derivs(x)
        top = rescaled_potential(0.0, h, p, include_v1=False)
        np.testing.assert_allclose(v, rescaled_potential(x, h, p, include_v1=False) - top, rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(d1, rescaled_potential(x, h, p, 1, include_v1=False), rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(d2, rescaled_potential(x, h, p, 2, include_v1=False), rtol=1e-12, atol=1e-9)

    def test_mode_potential(self):
        p = ManifoldParams(2, 3)
        ctx = mode_params(7, p)
        pot = ModePotential(ctx, p, shift="top")
        x = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(pot(x), ctx.lambda_sq * potential_V(x, ctx.h, p) - ctx.lambda_sq, rtol=1e-13)

    def test_constant_potential(self):
        c = ConstantPotential(2.5)
        assert np.all(c(np.zeros(3)) == 2.5) and np.all(c.d1(np.zeros(3)) == 0)


class TestRescaleField:
    def _gauss(self, g, s=0.5):
        return np.exp(-g.x**2 / (2 * s**2)).astype(complex)

    def test_l1_and_l2(self):
        p = ManifoldParams(2, 3)
        g = Grid1D.symmetric(8.0, 512)
        u = self._gauss(g)
        for h in (0.1, 0.01):
            v, tg, _, meta = rescale_field(u, g, h, p)
            l1 = g.dx * np.sum(np.abs(u))
            l2 = math.sqrt(g.dx * np.sum(np.abs(u) ** 2))
            assert tg.dx * np.sum(np.abs(v)) == pytest.approx(l1, rel=1e-10)
            assert math.sqrt(tg.dx * np.sum(np.abs(v) ** 2)) == pytest.approx(h ** (-1 / 6) * l2, rel=1e-8)
            assert meta["interpolation"] in ("spectral", "cubic", "identity")

    def test_h_one_identity(self):
        p = ManifoldParams(2, 3)
        g = Grid1D.symmetric(8.0, 128)
        u = self._gauss(g)
        v, _, _, meta = rescale_field(u, g, 1.0, p)
        np.testing.assert_array_equal(v, u)
        assert meta["interpolation"] == "identity"

    def test_time_scaling(self):
        p = ManifoldParams(3, 3)
        g = Grid1D.symmetric(8.0, 128)
        _, _, t, _ = rescale_field(self._gauss(g), g, 0.01, p, time=1.0)
        assert t == pytest.approx(0.01 ** (-0.5))

    def test_round_trip_converges(self):
        p = ManifoldParams(2, 3)
        h = 0.3
        errs = []
        for N in (64, 128, 256):
            g = Grid1D.symmetric(8.0, N)
            u = self._gauss(g, 1.0)
            v, tg, _, _ = rescale_field(u, g, h, p)
            # inverse onto a grid that is not the original: cubic/spectral interpolation both exercised
            w, _, _, _ = rescale_field(v, tg, h, p, direction="inverse", target=Grid1D.symmetric(6.0, N))
            ref = np.exp(-Grid1D.symmetric(6.0, N).x ** 2 / 2)
            errs.append(np.max(np.abs(w - ref)))
        assert errs[-1] < 1e-10 or np.log2(errs[0] / errs[1]) >= 2

    def test_support_error(self):
        p = ManifoldParams(2, 3)
        g = Grid1D.symmetric(1.0, 64)
        with pytest.raises(ValueError, match="exceeds"):
            rescale_field(self._gauss(g), g, 0.1, p, target=Grid1D.symmetric(100.0, 64))
