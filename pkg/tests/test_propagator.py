import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degtrap.geometry import ManifoldParams, RescaledPotential, mode_params, ModePotential
from degtrap.propagator import (
    AbsorberSpec,
    FrequencyWindow,
    Grid1D,
    MassLossError,
    StepConstraintError,
    WaveField,
    bump,
    evolve_mode,
    evolve_semiclassical,
    free_gaussian_exact,
    frequency_window,
    gaussian_packet,
    l2_norm_parseval,
    lq_norm,
    mixed_norm,
    norm_series_csv,
    read_snapshots,
    write_snapshots,
)


def stable_dt(grid, h, potential=None, frac=0.9):
    vmax = 0.0 if potential is None else float(np.max(np.abs(potential(grid.x))))
    lim = math.pi / (h * grid.xi_nyquist**2)
    if vmax > 0:
        lim = min(lim, 0.5 * h / vmax)
    return frac * lim


def rel_l2(a, b, dx):
    return math.sqrt(dx * np.sum(np.abs(a - b) ** 2)) / math.sqrt(dx * np.sum(np.abs(b) ** 2))


class TestGrid:
    def test_power_of_two(self):
        with pytest.raises(ValueError):
            Grid1D(0, 1, 100)
        with pytest.raises(ValueError):
            Grid1D(0, 1, 8)

    def test_spacing(self):
        g = Grid1D(-2, 2, 64)
        assert g.dx == 4 / 64 and g.x[0] == -2 and g.x[-1] == pytest.approx(2 - g.dx)

    def test_nan_rejected(self):
        g = Grid1D(0, 1, 16)
        v = np.zeros(16, complex)
        v[3] = np.nan
        with pytest.raises(ValueError):
            WaveField(g, v)


class TestNorms:
    def test_constant_l2(self):
        g = Grid1D(0, 1, 64)
        assert lq_norm(WaveField(g, np.full(64, 3 - 4j)), 2) == pytest.approx(5.0, rel=1e-14)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_parseval(self, seed):
        rng = np.random.default_rng(seed)
        g = Grid1D(-3, 5, 128)
        u = WaveField(g, rng.normal(size=128) + 1j * rng.normal(size=128))
        assert l2_norm_parseval(u) == pytest.approx(lq_norm(u, 2), rel=1e-10)

    def test_gaussian_l4_closed_form(self):
        # int exp(-2 x^2 / s^2) dx = s sqrt(pi/2), normalized packet amplitude (pi s^2)^{-1/4}
        s = 0.7
        g = Grid1D.symmetric(12, 1024)
        u = gaussian_packet(g, sigma=s)
        exact = ((math.pi * s**2) ** -1 * s * math.sqrt(math.pi / 2)) ** 0.25
        assert lq_norm(u, 4) == pytest.approx(exact, rel=1e-12)

    def test_inf_and_invalid(self):
        g = Grid1D(0, 1, 16)
        u = WaveField(g, np.arange(16.0))
        assert lq_norm(u, math.inf) == 15.0
        with pytest.raises(ValueError):
            lq_norm(u, 0.5)


class TestMixedNorm:
    def test_stationary(self):
        g = Grid1D.symmetric(5, 64)
        u = gaussian_packet(g)
        T = 2.0
        traj = [u.replace(time=t) for t in np.linspace(0, T, 9)]
        assert mixed_norm(traj, 3, 4, T) == pytest.approx(T ** (1 / 3) * lq_norm(u, 4), rel=1e-13)

    def test_p_inf(self):
        g = Grid1D.symmetric(5, 64)
        u = gaussian_packet(g)
        traj = [u.replace(values=u.values * (1 + t), time=t) for t in np.linspace(0, 1, 5)]
        assert mixed_norm(traj, math.inf, 2) == pytest.approx(2 * lq_norm(u, 2), rel=1e-13)

    def test_free_gaussian_p4_q4(self):
        # ||u(t)||_4^4 = (2 pi)^{-1/2} |s2|^{-1} s ... closed form: (pi s^2)^{-1} s^2 / |s_t| * |s_t| sqrt(pi/2)/ s_eff
        h, s, T = 1.0, 1.0, 1.0
        g = Grid1D.symmetric(20, 512)
        u0 = gaussian_packet(g, sigma=s)
        ts = np.linspace(0, T, 65)
        traj = evolve_semiclassical(u0, h, None, T, stable_dt(g, h), times=ts)
        def q4(t):
            s2 = s**2 + 2j * h * t
            a = np.abs(np.sqrt(s**2 / s2)) ** 4 / (math.pi * s**2)
            # |exp(-x^2/(2 s2))|^4 = exp(-2 x^2 Re(1/s2)) integrates to sqrt(pi / (2 Re(1/s2)))
            return a * math.sqrt(math.pi / (2 * (1 / s2).real))
        tt = np.linspace(0, T, 20001)
        exact = np.trapezoid([q4(t) for t in tt], tt) ** 0.25
        assert mixed_norm(traj, 4, 4, T) == pytest.approx(exact, rel=0.01)

    def test_refinement_error(self):
        g = Grid1D.symmetric(5, 64)
        u = gaussian_packet(g)
        ts = np.linspace(0, 1, 5)
        traj = [u.replace(values=u.values * math.exp(8 * t), time=t) for t in ts]
        with pytest.raises(ValueError, match="snapshot density"):
            mixed_norm(traj, 2, 2)


class TestFreeEvolution:
    @pytest.mark.parametrize("h", [1.0, 0.05])
    def test_matches_closed_form(self, h):
        g = Grid1D.symmetric(40, 2048)
        x0, p0, s = -2.0, 0.4, 1.0 if h == 1.0 else 0.3
        u0 = gaussian_packet(g, x0, p0, s, h)
        ts = np.linspace(0, 2.0, 11)
        traj = evolve_semiclassical(u0, h, None, 2.0, stable_dt(g, h), times=ts)
        for w in traj:
            ex = free_gaussian_exact(g.x, w.time, h, x0, p0, s)
            assert rel_l2(w.values, ex, g.dx) <= 1e-8

    def test_mass_conservation(self):
        g = Grid1D.symmetric(10, 256)
        u0 = gaussian_packet(g, 0, 1.0, 0.5, 0.1)
        traj = evolve_semiclassical(u0, 0.1, lambda x: 0.3 * np.cos(x), 5.0, 1e-3, times=np.linspace(0, 5, 6))
        for w in traj:
            assert abs(w.norm() / u0.norm() - 1) <= 1e-10 * w.time + 1e-13 + 1e-15 * w.meta["steps"]


class TestHarmonicOscillator:
    def test_coherent_state_follows_classical_path(self):
        # h D_t v + (-h^2 d^2 + x^2) v = 0: x(t) = x0 cos 2t, period pi
        h = 0.01
        g = Grid1D.symmetric(2.5, 512)
        x0 = 1.0
        V = lambda x: x**2
        u0 = gaussian_packet(g, x0, 0.0, math.sqrt(h), h)
        ts = np.linspace(0, math.pi, 9)
        traj = evolve_semiclassical(u0, h, V, math.pi, stable_dt(g, h, V), times=ts)
        for w in traj:
            c = g.dx * np.sum(g.x * np.abs(w.values) ** 2)
            assert c == pytest.approx(x0 * math.cos(2 * w.time), abs=1e-6)


class TestConvergence:
    def test_step_halving_second_order(self):
        p = ManifoldParams(2, 3)
        h = 1e-2
        pot = RescaledPotential(h, p, shift="top")
        g = Grid1D.symmetric(12, 512)
        u0 = gaussian_packet(g, 0.0, 0.5, 1.0)
        T = 1.0
        dt = stable_dt(g, 1.0, pot)
        sols = [evolve_semiclassical(u0, 1.0, pot, T, dt / r)[-1].values for r in (1, 2, 4)]
        e1 = np.linalg.norm(sols[0] - sols[1])
        e2 = np.linalg.norm(sols[1] - sols[2])
        assert math.log2(e1 / e2) >= 2 - 0.05

    def test_grid_doubling_spectral(self):
        errs = []
        for N in (64, 128, 256):
            g = Grid1D.symmetric(20, N)
            u0 = gaussian_packet(g, 0, 0, 1.0)
            w = evolve_semiclassical(u0, 1.0, None, 1.0, stable_dt(Grid1D.symmetric(20, 256), 1.0))[-1]
            errs.append(rel_l2(w.values, free_gaussian_exact(g.x, 1.0, 1.0), g.dx))
        assert errs[0] / errs[1] >= 10 or errs[1] < 1e-12


class TestConstraints:
    def test_potential_constraint(self):
        g = Grid1D.symmetric(5, 64)
        with pytest.raises(StepConstraintError, match="potential"):
            evolve_semiclassical(gaussian_packet(g), 0.1, lambda x: 10 + 0 * x, 1.0, 0.01)

    def test_kinetic_constraint(self):
        g = Grid1D.symmetric(5, 1024)
        with pytest.raises(StepConstraintError, match="kinetic"):
            evolve_semiclassical(gaussian_packet(g), 1.0, None, 1.0, 0.1)

    def test_absorber_region_overlap(self):
        g = Grid1D.symmetric(10, 256)
        with pytest.raises(ValueError, match="overlaps"):
            evolve_semiclassical(gaussian_packet(g), 1.0, None, 1.0, stable_dt(g, 1.0), absorber=AbsorberSpec(3.0),
                                 region=(-8, 8))

    def test_absorber_takes_mass(self):
        g = Grid1D.symmetric(10, 512)
        u0 = gaussian_packet(g, 0, 3.0, 1.0)
        dt = min(stable_dt(g, 1.0), 0.1)
        traj = evolve_semiclassical(u0, 1.0, None, 4.0, dt, absorber=AbsorberSpec(4.0, 5.0), region=(-6, 6))
        assert traj[-1].meta["absorbed_mass_fraction"] > 0.98

    def test_absorber_vanishes_inside(self):
        g = Grid1D.symmetric(10, 256)
        a = AbsorberSpec(2.0)
        lo, hi = a.interior(g)
        w = a.weights(g)
        assert np.all(w[(g.x >= lo) & (g.x <= hi)] == 0) and w.max() > 0

    def test_mass_loss_detected(self):
        g = Grid1D.symmetric(5, 64)
        with pytest.raises(MassLossError):
            evolve_semiclassical(gaussian_packet(g), 1.0, None, 1.0, stable_dt(g, 1.0), mass_rtol=-1.0)


class TestModeForm:
    def test_substitution_identity(self):
        p = ManifoldParams(2, 3)
        ctx = mode_params(20, p)
        h = ctx.h
        g = Grid1D.symmetric(3, 512)
        u0 = gaussian_packet(g, 0.3, 0.0, 0.2)
        T = 0.02
        pot = ModePotential(ctx, p, shift="top")
        dt = stable_dt(g, 1.0, pot)
        tm = evolve_mode(u0, ctx, p, T, dt, times=[0, T / 2, T], shift="top")
        pot_sc = lambda x: h**2 * pot(x)
        ts = evolve_semiclassical(u0, h, pot_sc, T / h, dt / h, times=[0, T / (2 * h), T / h])
        for a, b in zip(tm, ts):
            assert rel_l2(a.values, b.values, g.dx) <= 1e-8

    def test_mass_over_trap_time(self):
        p = ManifoldParams(2, 3)
        k = 40
        ctx = mode_params(k, p)
        g = Grid1D.symmetric(3, 512)
        u0 = gaussian_packet(g, 0.0, 0.0, 0.2)
        T = k ** (-2 / 3)
        w = evolve_mode(u0, ctx, p, T, stable_dt(g, 1.0, ModePotential(ctx, p, shift="top")), shift="top")[-1]
        assert abs(w.norm() / u0.norm() - 1) <= 1e-10

    def test_time_reversal(self):
        p = ManifoldParams(2, 3)
        ctx = mode_params(10, p)
        g = Grid1D.symmetric(3, 256)
        u0 = gaussian_packet(g, 0.2, 0.0, 0.2)
        dt = stable_dt(g, 1.0, ModePotential(ctx, p, shift="top"))
        fwd = evolve_mode(u0, ctx, p, 0.05, dt, shift="top")[-1]
        back = evolve_mode(fwd.replace(time=0.0), ctx, p, 0.05, dt, shift="top", direction=-1)[-1]
        assert rel_l2(back.values, u0.values, g.dx) <= 1e-8


class TestFrequencyWindow:
    def test_all_pass(self):
        g = Grid1D.symmetric(5, 128)
        u = gaussian_packet(g, 0, 1.0, 0.5, 0.1)
        v = frequency_window(u, 0.1, FrequencyWindow("all"))
        np.testing.assert_allclose(v.values, u.values, atol=1e-14)

    def test_partition_resums(self):
        g = Grid1D.symmetric(5, 256)
        u = gaussian_packet(g, 0, 0.3, 0.2, 0.05)
        parts = [frequency_window(u, 0.05, FrequencyWindow(k, 0.5)) for k in ("bump", "plus", "minus")]
        np.testing.assert_allclose(sum(p.values for p in parts), u.values, atol=1e-12)

    def test_low_pass_kills_high_frequency(self):
        h = 0.01
        g = Grid1D.symmetric(5, 4096)
        u = gaussian_packet(g, 0, 1.0, 0.3, h)
        v = frequency_window(u, h, FrequencyWindow("bump", 0.2))
        assert v.norm() <= 1e-8 * u.norm()

    def test_bump_shape(self):
        assert bump(0.5) == 1.0 and bump(2.5) == 0.0 and 0 < bump(1.5) < 1


class TestSerialization:
    def test_snapshot_round_trip(self, tmp_path):
        g = Grid1D.symmetric(5, 64)
        u0 = gaussian_packet(g, 0, 1.0, 0.5)
        traj = evolve_semiclassical(u0, 1.0, None, 0.5, 0.005, times=[0, 0.25, 0.5])
        path = tmp_path / "traj.bin"
        write_snapshots(str(path), traj)
        header, back = read_snapshots(str(path))
        assert header["grid"] == g.as_dict() and header["dt"] == 0.005
        for a, b in zip(traj, back):
            assert a.time == b.time
            np.testing.assert_array_equal(a.values, b.values)
        raw = path.read_bytes()
        assert raw[:8] == b"DGTBIN01"

    def test_norm_csv(self):
        g = Grid1D.symmetric(5, 64)
        traj = [gaussian_packet(g).replace(time=t) for t in (0.0, 1.0)]
        text = norm_series_csv(traj, (2, 4))
        lines = text.splitlines()
        assert lines[0] == "t,L2,L4" and len(lines) == 3 and text.endswith("\n")
