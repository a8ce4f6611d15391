"""Numerical laboratory for Schroedinger evolution near degenerate hyperbolic trapping.

The model is the warped product R_x x S^{n-1} with warp A(x) = (1 + x^{2m})^{1/(2m)}.
Submodules:

geometry     warp, potentials, mode parameters, blow-up rescaling
propagator   split-step spectral solvers and norm functionals
flow         Hamiltonian flow, variational data, dyadic partition, non-trapping check
parametrix   WKB phase/amplitude tables, synthesis, dispersion measurement
quasimode    complex-phase quasimode and its residual
harmonics    zonal harmonics and sphere L^q norms
experiments  sweep drivers and exponent fits
cli          command-line dispatch
"""
__version__ = "0.1.0"
