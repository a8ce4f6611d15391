"""Free Schroedinger kernel through the WKB parametrix versus the split-step propagator.

Run: python demos/free_dispersion.py
"""
import math

import numpy as np

from degtrap.geometry import ConstantPotential
from degtrap.parametrix import build_amplitude, build_phase, dispersion_measure, synthesize
from degtrap.propagator import Grid1D, evolve_semiclassical, gaussian_packet


def main():
    phase = build_phase(ConstantPotential(0.0), 0.2, (-1, 1), (-14, 14), {"nt": 4, "neta": 385, "nx": 64})
    amp = build_amplitude(phase, 2)
    d = dispersion_measure(phase, None, phase.t_samples[1:])
    print(f"(t)^1/2 sup|K| = {d['max_constant']:.6f}, free constant (4 pi)^-1/2 = {d['free_constant']:.6f}")

    g = Grid1D(-32, 32, 2048)
    v0 = gaussian_packet(g, 0.0, 0.5, 1.0, 1.0)
    sel = (g.x >= -1 - 1e-12) & (g.x < 1 - 1e-12)
    dt = 0.9 * math.pi / g.xi_nyquist**2
    traj = evolve_semiclassical(v0, 1.0, None, phase.t_samples[-1], dt, times=phase.t_samples)
    for w, t in zip(traj, phase.t_samples):
        err = np.linalg.norm(synthesize(phase, amp, v0, t).values - w.values[sel]) * math.sqrt(phase.grid.dx)
        print(f"t={t:.3f}  parametrix vs propagator L2 error {err:.2e}")


if __name__ == "__main__":
    main()
