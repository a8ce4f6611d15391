"""Split-step spectral solvers for the reduced one-dimensional equations.

Two forms are supported and share one Strang kernel:

* semiclassical, ``h D_t v + (-h^2 d_x^2 + V) v = 0``, i.e.
  ``v_t = i h v_xx - (i/h) V v``;
* mode form, ``D_t u + P_k u = 0`` with ``P_k = -d_x^2 + k(k+n-2) A^{-2} + V_1``,
  which is the semiclassical form at h = 1 with the mode potential.

Fourier convention: ``u_hat(xi) = int exp(-i x xi) u(x) dx`` with inverse
``(2 pi)^{-1} int exp(i x xi) u_hat dxi``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sp_fft

from .geometry import ManifoldParams, ModeContext, ModePotential

__all__ = [
    "Grid1D",
    "WaveField",
    "AbsorberSpec",
    "FrequencyWindow",
    "StepConstraintError",
    "MassLossError",
    "evolve_semiclassical",
    "evolve_mode",
    "lq_norm",
    "l2_norm_parseval",
    "mixed_norm",
    "frequency_window",
    "fourier_transform",
    "gaussian_packet",
    "free_gaussian_exact",
    "bump",
    "bump_d1",
    "bump_d2",
    "write_container",
    "read_container",
    "write_snapshots",
    "read_snapshots",
    "norm_series_csv",
]


class StepConstraintError(ValueError):
    """A time-step or resolution precondition failed."""


class MassLossError(RuntimeError):
    """L^2 mass drifted beyond tolerance in a run without absorber."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid ``x_j = x_min + j dx``, ``dx = (x_max - x_min)/N``."""

    x_min: float
    x_max: float
    N: int

    def __post_init__(self):
        if self.N < 16 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 16, got {self.N}")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @classmethod
    def symmetric(cls, L: float, N: int) -> "Grid1D":
        return cls(-L, L, N)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.N

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.N)

    @property
    def xi(self) -> np.ndarray:
        """Angular wavenumbers in FFT order."""
        return 2 * np.pi * np.fft.fftfreq(self.N, d=self.dx)

    @property
    def xi_nyquist(self) -> float:
        return np.pi / self.dx

    def as_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "N": self.N}


@dataclass(frozen=True)
class WaveField:
    grid: Grid1D
    values: np.ndarray
    time: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.grid.N,):
            raise ValueError(f"values must have shape ({self.grid.N},), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("wave field contains NaN or Inf")
        object.__setattr__(self, "values", v)

    def replace(self, values=None, time=None, meta=None) -> "WaveField":
        return WaveField(
            self.grid,
            self.values if values is None else values,
            self.time if time is None else time,
            dict(self.meta) if meta is None else meta,
        )

    def norm(self, q: float = 2.0) -> float:
        return lq_norm(self, q)


@dataclass(frozen=True)
class AbsorberSpec:
    """Complex absorbing potential ``-i W(x)`` in layers of ``width`` at both ends.

    W ramps smoothly from 0 at the inner edge of each layer to ``strength``
    at the boundary; the ramp is ``sin^2`` (``profile="sin2"``) or the
    C-infinity bump complement (``profile="smooth"``).
    """

    width: float
    strength: float = 1.0
    profile: str = "smooth"

    def weights(self, grid: Grid1D) -> np.ndarray:
        x = grid.x
        d_left = x - grid.x_min
        d_right = grid.x_max - x
        d = np.minimum(d_left, d_right)
        s = np.clip(1.0 - d / self.width, 0.0, 1.0)
        if self.profile == "sin2":
            ramp = np.sin(0.5 * np.pi * s) ** 2
        elif self.profile == "smooth":
            ramp = 1.0 - bump(1.0 + s)  # 0 for s <= 0, 1 at s = 1
        else:
            raise ValueError(f"unknown absorber profile {self.profile!r}")
        return self.strength * ramp

    def interior(self, grid: Grid1D) -> tuple[float, float]:
        return grid.x_min + self.width, grid.x_max - self.width


@dataclass(frozen=True)
class FrequencyWindow:
    """Multiplier ``m(h xi)`` built from the canonical bump.

    kind : "all" (identity), "bump" (chi(r/scale)), "plus" / "minus"
    (the tails chi^{+-}(r/scale) with chi + chi^+ + chi^- = 1).
    """

    kind: str = "all"
    scale: float = 1.0

    def __call__(self, r):
        r = np.asarray(r, dtype=float) / self.scale
        if self.kind == "all":
            return np.ones_like(r)
        b = bump(r)
        if self.kind == "bump":
            return b
        if self.kind == "plus":
            return np.where(r > 0, 1.0 - b, 0.0)
        if self.kind == "minus":
            return np.where(r < 0, 1.0 - b, 0.0)
        raise ValueError(f"unknown window kind {self.kind!r}")


def _ramp(s):
    """exp(1 - 1/(1 - s^2)) on |s| < 1, 0 otherwise (value 1 at s = 0)."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    si = s[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - si * si))
    return out


def bump(s):
    """Canonical cutoff: 1 on |s| <= 1, 0 on |s| >= 2, exp(1 - 1/(1-(|s|-1)^2)) between."""
    a = np.abs(np.asarray(s, dtype=float))
    out = np.where(a <= 1.0, 1.0, 0.0)
    mid = (a > 1.0) & (a < 2.0)
    out[mid] = _ramp(a[mid] - 1.0)
    return out if np.ndim(s) else float(out)


def bump_d1(s):
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    out = np.zeros_like(s)
    mid = (a > 1.0) & (a < 2.0)
    u = a[mid] - 1.0
    g = np.exp(1.0 - 1.0 / (1.0 - u * u))
    out[mid] = np.sign(s[mid]) * g * (-2.0 * u / (1.0 - u * u) ** 2)
    return out if np.ndim(s) else float(out)


def bump_d2(s):
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    out = np.zeros_like(s)
    mid = (a > 1.0) & (a < 2.0)
    u = a[mid] - 1.0
    w = 1.0 - u * u
    g = np.exp(1.0 - 1.0 / w)
    dlog = -2.0 * u / w**2
    ddlog = -2.0 / w**2 - 8.0 * u * u / w**3
    out[mid] = g * (dlog**2 + ddlog)
    return out if np.ndim(s) else float(out)


def fourier_transform(u: WaveField) -> tuple[np.ndarray, np.ndarray]:
    """Return (xi, u_hat(xi)) in FFT order, u_hat = int exp(-i x xi) u dx."""
    g = u.grid
    xi = g.xi
    return xi, g.dx * np.exp(-1j * xi * g.x_min) * np.fft.fft(u.values)


def _inverse_transform(grid: Grid1D, uhat: np.ndarray) -> np.ndarray:
    return np.fft.ifft(uhat * np.exp(1j * grid.xi * grid.x_min)) / grid.dx


def lq_norm(u: WaveField, q: float) -> float:
    """Periodic trapezoid quadrature of |u|^q; q = inf returns max |u|."""
    q = float(q)
    if q < 1:
        raise ValueError("q must be >= 1")
    a = np.abs(u.values)
    if math.isinf(q):
        return float(a.max())
    amax = a.max()
    if amax == 0:
        return 0.0
    return float(amax * (u.grid.dx * np.sum((a / amax) ** q)) ** (1.0 / q))


def l2_norm_parseval(u: WaveField) -> float:
    """L^2 norm from the Fourier side, ((2 pi)^{-1} int |u_hat|^2)^{1/2}."""
    _, uh = fourier_transform(u)
    dxi = 2 * np.pi / u.grid.length
    return float(np.sqrt(np.sum(np.abs(uh) ** 2) * dxi / (2 * np.pi)))


def mixed_norm(traj: Sequence[WaveField], p: float, q: float, T: float | None = None,
               rtol: float = 0.01) -> float:
    """(int_0^T ||u(t)||_q^p dt)^{1/p} by trapezoid in time over the snapshots.

    The trapezoid value is compared with the one using every other snapshot;
    a relative change above ``rtol`` raises ``ValueError``.
    """
    times = np.array([w.time for w in traj])
    if T is None:
        T = times[-1]
    sel = times <= T * (1 + 1e-12)
    times = times[sel]
    norms = np.array([lq_norm(w, q) for w, s in zip(traj, sel) if s])
    if len(times) < 2 or abs(times[0]) > 1e-12 * max(1.0, T) or abs(times[-1] - T) > 1e-9 * max(1.0, T):
        raise ValueError("snapshots must cover [0, T] including both endpoints")
    if math.isinf(p):
        return float(norms.max())
    f = norms**p
    fine = np.trapezoid(f, times)
    if len(times) >= 5 and (len(times) - 1) % 2 == 0:
        coarse = np.trapezoid(f[::2], times[::2])
        change = abs(fine - coarse) / max(abs(fine), 1e-300)
        if change > rtol:
            raise ValueError(
                f"insufficient snapshot density: halving changes the time integral by {change:.3g} "
                f"(> {rtol}); refinement estimate of the error ~ {change / 3:.3g}"
            )
    return float(fine ** (1.0 / p))


def frequency_window(u: WaveField, h: float, window: FrequencyWindow) -> WaveField:
    """Apply ``window(h xi)`` as a Fourier multiplier."""
    xi, uh = fourier_transform(u)
    return u.replace(values=_inverse_transform(u.grid, uh * window(h * xi)))


def gaussian_packet(grid: Grid1D, x0: float = 0.0, p0: float = 0.0, sigma: float = 1.0,
                    h: float = 1.0, normalize: str = "l2") -> WaveField:
    """exp(-(x-x0)^2/(2 sigma^2) + i p0 (x-x0)/h), normalized in L^2 or L^1."""
    x = grid.x
    v = np.exp(-((x - x0) ** 2) / (2 * sigma**2) + 1j * p0 * (x - x0) / h)
    if normalize == "l2":
        v = v / (np.pi * sigma**2) ** 0.25
    elif normalize == "l1":
        v = v / (np.sqrt(2 * np.pi) * sigma)
    elif normalize != "none":
        raise ValueError(normalize)
    return WaveField(grid, v, 0.0, {"data": "gaussian", "x0": x0, "p0": p0, "sigma": sigma})


def free_gaussian_exact(x, t: float, h: float, x0: float = 0.0, p0: float = 0.0,
                        sigma: float = 1.0) -> np.ndarray:
    """Exact solution of v_t = i h v_xx from the L^2-normalized gaussian_packet data."""
    x = np.asarray(x, dtype=float)
    s2 = sigma**2 + 2j * h * t
    # plane-wave factor moves the centre at velocity 2 p0
    xc = x - x0 - 2 * p0 * t
    amp = (np.pi * sigma**2) ** -0.25 * np.sqrt(sigma**2 / s2)
    phase = 1j * p0 * (x - x0) / h - 1j * p0**2 * t / h
    return amp * np.exp(-xc**2 / (2 * s2) + phase)


def _potential_values(potential, x) -> np.ndarray:
    if potential is None:
        return np.zeros_like(x)
    v = np.asarray(potential(x), dtype=float)
    return np.broadcast_to(v, x.shape).astype(float)


def _sample_times(t_final: float, times) -> np.ndarray:
    if times is None:
        times = [0.0, t_final]
    times = np.asarray(sorted(set(float(t) for t in times) | {0.0}), dtype=float)
    if times[0] < 0 or times[-1] > t_final * (1 + 1e-12) + 1e-300:
        raise ValueError("sample times must lie in [0, t_final]")
    return times


def check_step(grid: Grid1D, h: float, vmax: float, dt: float,
               potential_limit: float = 0.5, kinetic_limit: float = math.pi) -> dict:
    """Evaluate both step constraints; raise StepConstraintError naming the binding one."""
    pot = dt * vmax / h
    kin = dt * h * grid.xi_nyquist**2
    info = {"potential_phase": pot, "kinetic_phase_nyquist": kin,
            "potential_limit": potential_limit, "kinetic_limit": kinetic_limit}
    if pot > potential_limit:
        raise StepConstraintError(
            f"dt={dt:.3g} violates the potential constraint dt*max|V|/h = {pot:.3g} > {potential_limit}; "
            f"need dt <= {potential_limit * h / vmax:.3g}"
        )
    if kin > kinetic_limit:
        raise StepConstraintError(
            f"dt={dt:.3g} violates the kinetic constraint dt*h*xi_nyq^2 = {kin:.3g} > {kinetic_limit:.3g}; "
            f"need dt <= {kinetic_limit / (h * grid.xi_nyquist ** 2):.3g}"
        )
    return info


def _strang(v0: WaveField, h: float, V: np.ndarray, times: np.ndarray, dt: float,
            W: np.ndarray | None, meta: dict, direction: int = 1) -> list[WaveField]:
    grid = v0.grid
    kin_cache: dict[float, np.ndarray] = {}
    pot_cache: dict[float, np.ndarray] = {}
    xi2 = grid.xi**2

    def factors(step):
        if step not in kin_cache:
            kin_cache[step] = np.exp(-1j * direction * h * xi2 * step)
            half = -0.5j * direction * V * step / h
            if W is not None:
                half = half - 0.5 * W * step / h
            pot_cache[step] = np.exp(half)
        return kin_cache[step], pot_cache[step]

    v = v0.values.copy()
    out = []
    t = 0.0
    steps = 0
    for target in times:
        span = target - t
        if span > 0:
            n = max(1, math.ceil(span / dt * (1 - 1e-12)))
            step = span / n
            K, P = factors(step)
            P2 = P * P
            v = P * v
            for i in range(n):
                w = sp_fft.fft(v, overwrite_x=True)
                w *= K
                v = sp_fft.ifft(w, overwrite_x=True)
                v *= P2 if i < n - 1 else P
            t = target
            steps += n
        out.append(WaveField(grid, v.copy(), float(target), {**meta, "steps": steps}))
    return out


def evolve_semiclassical(v0: WaveField, h: float, potential: Callable | None, t_final: float,
                         dt: float, absorber: AbsorberSpec | None = None, times=None,
                         region: tuple[float, float] | None = None,
                         mass_rtol: float = 1e-10, kinetic_limit: float = math.pi,
                         potential_limit: float = 0.5, direction: int = 1) -> list[WaveField]:
    """Evolve ``h D_t v + (-h^2 d_x^2 + V) v = 0`` from ``v0`` and return snapshots.

    Parameters
    ----------
    v0 : initial WaveField
    h : semiclassical parameter (h = 1 for an ordinary Schroedinger equation)
    potential : callable x -> V(x), or None for V = 0
    t_final : final time
    dt : maximal internal step; every interval between sample times is split
        into equal sub-steps no longer than ``dt``
    absorber : optional complex absorbing layer
    times : sample times (0 and ``t_final`` are always included)
    region : interior region of interest; an absorber reaching into it is an error
    direction : +1 evolves by exp(-i t P/h) (the equation above); -1 by
        exp(+i t P/h), the convention of the local smoothing integrals.  The
        absorber damps in either direction.

    Returns
    -------
    list of WaveField, one per sample time.  Each carries ``meta`` with the
    grid, h, potential id, dt, constraint values and absorbed mass.
    """
    grid = v0.grid
    V = _potential_values(potential, grid.x)
    vmax = float(np.max(np.abs(V))) if V.size else 0.0
    info = check_step(grid, h, vmax, dt, potential_limit, kinetic_limit)
    W = None
    if absorber is not None:
        lo, hi = absorber.interior(grid)
        if region is not None and (region[0] < lo or region[1] > hi):
            raise ValueError(f"absorber layer overlaps the reported region {region}; interior is [{lo}, {hi}]")
        W = absorber.weights(grid)
    sample = _sample_times(t_final, times)
    meta = {
        "grid": grid.as_dict(), "h": h, "dt": dt,
        "potential": getattr(potential, "id", "none" if potential is None else repr(potential)),
        "absorber": None if absorber is None else vars(absorber).copy(), "direction": direction, **info,
    }
    traj = _strang(v0, h, V, sample, dt, W, meta, direction)
    m0 = lq_norm(v0, 2)
    for w in traj:
        mass = lq_norm(w, 2)
        w.meta["absorbed_mass_fraction"] = float(1 - (mass / m0) ** 2) if m0 > 0 else 0.0
        if absorber is None and m0 > 0:
            drift = abs(mass / m0 - 1)
            # roundoff floor grows with the number of unitary steps
            if drift > mass_rtol * w.time + 1e-13 + 1e-15 * w.meta["steps"]:
                raise MassLossError(f"mass drift {drift:.3g} at t={w.time:.4g} exceeds {mass_rtol}/unit time")
    return traj


def evolve_mode(u0: WaveField, ctx: ModeContext, p: ManifoldParams, t_final: float, dt: float,
                times=None, absorber: AbsorberSpec | None = None, include_v1: bool = True,
                shift: float | str = 0.0, region=None, **kwargs) -> list[WaveField]:
    """Evolve ``D_t u + P_k u = 0``, ``P_k = -d_x^2 + k(k+n-2) A^{-2} + V_1``.

    ``shift`` subtracts a constant from the potential (``"top"`` removes
    k(k+n-2)); this only multiplies the solution by a global phase.
    """
    pot = ModePotential(ctx, p, include_v1=include_v1, shift=shift)
    traj = evolve_semiclassical(u0, 1.0, pot, t_final, dt, absorber=absorber, times=times,
                                region=region, **kwargs)
    for w in traj:
        w.meta.update({"k": ctx.k, "m": p.m, "n": p.n, "form": "mode"})
    return traj


# ---------------------------------------------------------------- serialization

SNAPSHOT_MAGIC = b"DGTBIN01"


def write_container(path: str, kind: str, header: dict, arrays: Sequence[np.ndarray]) -> None:
    """Binary container: magic, uint64 header length, UTF-8 JSON header, then arrays.

    Arrays are stored as little-endian float64 (complex arrays as interleaved
    real/imaginary pairs); the header records each array's shape and dtype.
    """
    specs = []
    for a in arrays:
        a = np.asarray(a)
        specs.append({"shape": list(a.shape), "complex": bool(np.iscomplexobj(a))})
    blob = json.dumps({"kind": kind, "arrays": specs, **header}, sort_keys=True,
                      default=_json_scalar).encode("utf-8")
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays:
            a = np.asarray(a)
            if np.iscomplexobj(a):
                a = np.ascontiguousarray(a, dtype="<c16").view("<f8")
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path: str) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise ValueError(f"{path} is not a snapshot container")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        arrays = []
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape, dtype=np.int64)) * (2 if spec["complex"] else 1)
            raw = np.frombuffer(f.read(8 * count), dtype="<f8")
            if raw.size != count:
                raise ValueError(f"{path} is truncated")
            a = raw.view("<c16") if spec["complex"] else raw
            arrays.append(a.reshape(shape).astype(complex if spec["complex"] else float))
    return header, arrays


def _json_scalar(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def write_snapshots(path: str, traj: Sequence[WaveField], h: float | None = None,
                    potential_id: str | None = None, dt: float | None = None) -> None:
    """Store a trajectory: header (grid, h, potential id, dt, times), body (complex samples)."""
    if not traj:
        raise ValueError("empty trajectory")
    g = traj[0].grid
    if any(w.grid != g for w in traj):
        raise ValueError("all snapshots must share one grid")
    meta = traj[0].meta
    header = {"grid": g.as_dict(), "h": meta.get("h", h) if h is None else h,
              "potential": meta.get("potential") if potential_id is None else potential_id,
              "dt": meta.get("dt") if dt is None else dt, "times": [float(w.time) for w in traj]}
    write_container(path, "trajectory", header, [np.stack([w.values for w in traj])])


def read_snapshots(path: str) -> tuple[dict, list[WaveField]]:
    header, (body,) = read_container(path)
    if header.get("kind") != "trajectory":
        raise ValueError(f"{path} holds a {header.get('kind')!r}, not a trajectory")
    g = Grid1D(**header["grid"])
    meta = {k: header[k] for k in ("h", "potential", "dt")}
    return header, [WaveField(g, v, t, dict(meta)) for v, t in zip(body, header["times"])]


def norm_series_csv(traj: Sequence[WaveField], q_list: Sequence[float] = (2.0,)) -> str:
    """CSV text with header ``t,L<q>...`` and one row per snapshot."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"L{q:g}" for q in q_list])
    for u in traj:
        w.writerow([repr(float(u.time))] + [repr(lq_norm(u, q)) for q in q_list])
    return buf.getvalue()
