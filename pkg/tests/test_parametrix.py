import math

import numpy as np
import pytest

from degtrap.geometry import ManifoldParams, RescaledPotential
from degtrap.parametrix import (
    CausticError,
    QuadratureResolutionError,
    build_amplitude,
    build_phase,
    dispersion_measure,
    intertwining_check,
    load_phase_table,
    phase_bounds,
    save_phase_table,
    synthesize,
    synthesize_hat,
)
from degtrap.propagator import Grid1D, evolve_semiclassical, free_gaussian_exact, gaussian_packet


class Quadratic:
    def __init__(self, c):
        self.c = c
        self.id = f"quadratic({c})"

    def __call__(self, x):
        return self.c * np.asarray(x, dtype=float) ** 2

    def d1(self, x):
        return 2 * self.c * np.asarray(x, dtype=float)

    def d2(self, x):
        return 2 * self.c + 0 * np.asarray(x, dtype=float)


FREE = Quadratic(0.0)


@pytest.fixture(scope="module")
def free_table():
    ph = build_phase(FREE, 0.2, (-1, 1), (-14, 14), {"nt": 4, "neta": 385, "nx": 64})
    return ph, build_amplitude(ph, 2)


@pytest.fixture(scope="module")
def m2_pot():
    return RescaledPotential(1e-2, ManifoldParams(2, 3), include_v1=False, shift="top")


@pytest.fixture(scope="module")
def m2_table(m2_pot):
    ph = build_phase(m2_pot, 0.2, (-1, 1), (-8, 8), {"nt": 4, "neta": 129, "nx": 32})
    return ph, build_amplitude(ph, 4)


class TestFreePhase:
    def test_hamilton_jacobi_solution(self, free_table):
        ph, _ = free_table
        X = ph.grid.x[None, :, None]
        E = ph.eta_samples[None, None, :]
        T = ph.t_samples[:, None, None]
        assert np.max(np.abs(ph.phi - (X * E - T * E**2))) <= 1e-12
        assert np.max(np.abs(ph.phi_x - E)) <= 1e-12
        assert np.max(np.abs(ph.phi_eta - (X - 2 * T * E))) <= 1e-12
        assert np.max(np.abs(ph.phi_etaeta + 2 * T)) <= 1e-12
        assert np.max(np.abs(ph.phi_xx)) <= 1e-12

    def test_initial_phase_exact(self, free_table):
        ph, _ = free_table
        np.testing.assert_array_equal(ph.phi[0], ph.grid.x[:, None] * ph.eta_samples[None, :])

    def test_amplitudes_vanish(self, free_table):
        _, amp = free_table
        assert np.all(amp.B[0] == 1)
        assert np.max(np.abs(amp.B[1:])) <= 1e-12

    def test_identity_at_zero(self, free_table):
        ph, amp = free_table
        g = Grid1D(-32, 32, 2048)
        v0 = gaussian_packet(g, 0.1, 0.5, 1.0, 1.0)
        sel = (g.x >= -1 - 1e-12) & (g.x < 1 - 1e-12)
        w = synthesize(ph, amp, v0, 0.0)
        assert np.max(np.abs(w.values - v0.values[sel])) <= 1e-10

    def test_matches_free_propagator(self, free_table):
        ph, amp = free_table
        g = Grid1D(-32, 32, 2048)
        v0 = gaussian_packet(g, 0.0, 0.5, 1.0, 1.0)
        sel = (g.x >= -1 - 1e-12) & (g.x < 1 - 1e-12)
        dt = 0.9 * math.pi / g.xi_nyquist**2
        traj = evolve_semiclassical(v0, 1.0, None, 0.2, dt, times=ph.t_samples)
        for w_ref, t in zip(traj, ph.t_samples):
            w = synthesize(ph, amp, v0, t)
            err = np.linalg.norm(w.values - w_ref.values[sel]) * math.sqrt(ph.grid.dx) / v0.norm()
            assert err <= 1e-6
            exact = free_gaussian_exact(ph.grid.x, t, 1.0, 0.0, 0.5, 1.0)
            assert np.max(np.abs(w.values - exact)) <= 1e-8

    def test_free_dispersion_constant(self, free_table):
        ph, _ = free_table
        d = dispersion_measure(ph, None, ph.t_samples[1:])
        assert d["free_constant"] == pytest.approx((4 * math.pi) ** -0.5, rel=1e-14)
        assert d["max_constant"] == pytest.approx(d["free_constant"], rel=0.02)

    def test_out_of_band_data(self, free_table):
        ph, amp = free_table
        g = Grid1D(-32, 32, 2048)
        with pytest.raises(ValueError, match="outside"):
            synthesize(ph, amp, gaussian_packet(g, 0, 0, 0.1, 1.0), 0.1)

    def test_table_time_required(self, free_table):
        ph, _ = free_table
        with pytest.raises(ValueError, match="table time"):
            ph.t_index(0.123)

    def test_quadrature_refinement_error(self, free_table):
        ph, _ = free_table
        # data oscillating faster than the eta lattice resolves
        vhat = np.exp(-1j * 200.0 * ph.eta_samples)
        with pytest.raises(QuadratureResolutionError):
            synthesize_hat(ph, None, vhat, 0.1)


class TestRescaledPhase:
    def test_eikonal_residual(self, m2_table):
        ph, _ = m2_table
        assert ph.meta["eikonal_max"] <= 1e-6
        assert np.all(ph.valid)

    def test_intertwining(self, m2_table, m2_pot):
        ph, _ = m2_table
        r = intertwining_check(ph, m2_pot)
        assert r["phi_x_error"] <= 1e-6 and r["phi_eta_error"] <= 1e-6

    def test_phase_bounds(self, m2_table):
        ph, _ = m2_table
        b = phase_bounds(ph, 2)
        # phi_etaeta = -2t(1 + O(t)): the constant does not grow as t -> 0
        assert b["C_etaeta_small_t"] <= b["C_etaeta"] < 10
        assert b["C_xx"] < 100

    def test_amplitude_orders(self, m2_table):
        _, amp = m2_table
        assert amp.C[0] == 1.0
        assert all(c < 10 for c in amp.C)

    def test_parametrix_error_monotone_in_order(self, m2_table, m2_pot):
        ph, amp = m2_table
        dx = ph.grid.dx
        g = Grid1D(-32, 32, int(round(64 / dx)))
        v0 = gaussian_packet(g, 0.0, 0.0, 1.0, 1.0)
        sel = (g.x >= -1 - 1e-12) & (g.x < 1 - 1e-12)
        t = ph.t_samples[-1]
        ref = evolve_semiclassical(v0, 1.0, m2_pot, t, 1e-4)[-1].values[sel]
        errs = [np.linalg.norm(synthesize(ph, amp, v0, t, K=K).values - ref) for K in range(5)]
        assert all(b <= a for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-3 * errs[0]

    def test_round_trip(self, m2_table, tmp_path):
        ph, _ = m2_table
        path = tmp_path / "phase.bin"
        save_phase_table(ph, str(path))
        back = load_phase_table(str(path))
        for f in ("t_samples", "eta_samples", "phi", "phi_x", "phi_eta", "phi_etaeta", "phi_xx", "valid"):
            np.testing.assert_array_equal(getattr(back, f), getattr(ph, f))
        assert back.grid == ph.grid and back.potential_id == ph.potential_id


class TestCaustic:
    def test_focusing_potential(self):
        # V = 25 x^2: x = y cos(10 t) + ..., so dx/dy vanishes at t = pi/20
        with pytest.raises(CausticError) as ei:
            build_phase(Quadratic(25.0), 0.25, (-0.5, 0.5), (-1, 1), {"nt": 5, "neta": 5, "nx": 16})
        assert ei.value.t == pytest.approx(math.pi / 20, abs=0.25 / 30)
