"""Homoclinic / heteroclinic-to-infinity orbit construction.

An orbit is represented as a global parameterization t -> coordinates rather
than as a stored flow segment: closed form where available, otherwise a
numeric core spliced onto the asymptotic model of the limit set.  Downstream
quadratures always evaluate the parameterization; nothing ever re-flows a
saddle passage, which is what keeps roundoff from being amplified by the
saddle rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield
from typing import Callable, Optional

import numpy as np

from .hamcore import PhasePoint, VectorFieldHandle
from .odeint import EventSpec, Trajectory, detect_events, integrate

__all__ = [
    "SaddleInfo",
    "LimitOrbitDesc",
    "HomoclinicOrbit",
    "OrbitFamily",
    "ShotData",
    "ShootError",
    "find_saddle",
    "closed_form_homoclinic",
    "shoot_homoclinic",
    "parabolic_orbit_rtbp",
]


class ShootError(RuntimeError):
    pass


@dataclass
class SaddleInfo:
    point: PhasePoint
    jacobian: np.ndarray
    eigenvalues: np.ndarray
    classification: str
    unstable_dir: Optional[np.ndarray]
    stable_dir: Optional[np.ndarray]
    residual: float


@dataclass
class LimitOrbitDesc:
    """What the orbit tends to as t -> +-inf."""

    kind: str                 # "periodic" | "fixed-point" | "degenerate-circle"
    omega: float = 0.0        # angular rate on the limit set (0 if none)
    energy: float = 0.0
    note: str = ""


def _fd_jacobian(raw, x, step=1e-7):
    n = x.size
    J = np.empty((n, n))
    for j in range(n):
        h = step * (1.0 + abs(x[j]))
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        J[:, j] = (raw(0.0, xp) - raw(0.0, xm)) / (2.0 * h)
    return J


def _real_eigvec(vals, vecs, idx):
    v = vecs[:, idx]
    if abs(vals[idx].imag) > 1e-9:
        return None
    j = int(np.argmax(np.abs(v)))
    v = (v / v[j]).real
    n = np.linalg.norm(v)
    return v / n if n > 0 else None


def find_saddle(field: VectorFieldHandle, guess: PhasePoint, *,
                tol: float = 1e-12, max_iter: int = 50) -> SaddleInfo:
    """Newton search for a fixed point, with linearization data at the root."""
    x = guess.array
    raw = field.raw
    for _ in range(max_iter):
        f = np.asarray(raw(0.0, x), dtype=float)
        if np.linalg.norm(f) <= tol:
            break
        J = _fd_jacobian(raw, x)
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            raise ShootError("singular Jacobian away from a fixed point")
        x = x + dx
    else:
        f = np.asarray(raw(0.0, x), dtype=float)
        if np.linalg.norm(f) > tol:
            raise ShootError(
                f"fixed point search did not converge, residual "
                f"{np.linalg.norm(f):.3e}")
    res = float(np.linalg.norm(np.asarray(raw(0.0, x), dtype=float)))
    J = _fd_jacobian(x=x, raw=raw)
    vals, vecs = np.linalg.eig(J)
    re = vals.real
    has_pos = bool(np.any(re > 1e-7))
    has_neg = bool(np.any(re < -1e-7))
    if has_pos and has_neg:
        cls = "saddle"
    elif not has_pos and not has_neg and np.any(np.abs(vals.imag) > 1e-7):
        cls = "center"
    else:
        cls = "degenerate"
    udir = _real_eigvec(vals, vecs, int(np.argmax(re))) if has_pos else None
    sdir = _real_eigvec(vals, vecs, int(np.argmin(re))) if has_neg else None
    return SaddleInfo(point=PhasePoint(tuple(x), guess.chart_id),
                      jacobian=J, eigenvalues=vals, classification=cls,
                      unstable_dir=udir, stable_dir=sdir, residual=res)


@dataclass
class HomoclinicOrbit:
    """Parameterized orbit t -> coords, doubly asymptotic to `limit`.

    coords_batch must accept a float64 array and return unreduced chart
    coordinates, valid for every real t (asymptotic model beyond the core
    span).  phase_dev_batch gives the angle-fiber deviation sigma(t) with
    angle(t) = omega*t + phase_offset + sigma(t); sigma tends to the
    phase_constants at -inf/+inf.
    """

    kind: str                      # "saddle-loop" | "parabolic"
    dimension: int
    coords_batch: Callable[[np.ndarray], np.ndarray]
    limit: LimitOrbitDesc
    energy: float
    omega: float = 0.0
    phase_offset: float = 0.0
    phase_constants: tuple = (0.0, 0.0)
    phase_dev_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lam: Optional[float] = None    # exponential approach rate, None = power law
    tail_coeff: float = 1.0        # |orbit(t) - limit| <= tail_coeff * e^(-lam|t|)
    t_core: float = np.inf         # numeric span; beyond it the tail model rules
    chart_id: str = ""
    reducer: Optional[Callable] = None
    anchor_phase_index: Optional[int] = None
    meta: dict = dfield(default_factory=dict)

    def coords(self, t: float) -> np.ndarray:
        return self.coords_batch(np.array([float(t)]))[0]

    def state(self, t: float) -> PhasePoint:
        c = tuple(self.coords(t))
        if self.reducer is not None:
            c = self.reducer(c)
        return PhasePoint(c, chart_id=self.chart_id)

    def phase(self, t: float) -> float:
        dev = 0.0
        if self.phase_dev_batch is not None:
            dev = float(self.phase_dev_batch(np.array([float(t)]))[0])
        return self.omega * float(t) + self.phase_offset + dev

    def phase_batch(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        dev = (self.phase_dev_batch(ts) if self.phase_dev_batch is not None
               else 0.0)
        return self.omega * ts + self.phase_offset + dev

    def parameterization_field(self, X0: VectorFieldHandle) -> VectorFieldHandle:
        """State-independent field t -> X0(orbit(t)); integrating it carries
        the orbit along without dynamical feedback."""
        batch = self.coords_batch

        def raw(t, y):
            c = batch(np.array([float(t)]))[0]
            return np.asarray(X0.raw(float(t), c), dtype=y.dtype)

        return VectorFieldHandle(raw=raw, chart_id=self.chart_id)


@dataclass
class OrbitFamily:
    """Phase-indexed family of homoclinic orbits over a shared numeric core."""

    builder: Callable[[float], HomoclinicOrbit]
    omega: float
    lam: Optional[float]
    period: float
    kind: str = "saddle-loop"
    meta: dict = dfield(default_factory=dict)

    def __call__(self, phase) -> HomoclinicOrbit:
        # passed through unchanged: exact-trig phase wrappers must survive
        return self.builder(phase)


def closed_form_homoclinic(name: str, params: dict) -> HomoclinicOrbit:
    """Library of analytically known homoclinic loops.

    "duffing-planar": 2D loop z1 = (3/2) sech^2(t/2), z2 = dz1/dt.
    "duffing-oscillator": the planar loop crossed with a harmonic angle fiber
    (w1, w2) of amplitude set by the fiber energy g0 and rate alpha.
    """
    if name == "duffing-planar":
        def batch(ts):
            ts = np.asarray(ts, dtype=float)
            s = 1.0 / np.cosh(0.5 * ts)
            z1 = 1.5 * s * s
            z2 = -z1 * np.tanh(0.5 * ts)
            return np.stack([z1, z2], axis=1)

        return HomoclinicOrbit(
            kind="saddle-loop", dimension=2, coords_batch=batch,
            limit=LimitOrbitDesc(kind="fixed-point", energy=0.0),
            energy=0.0, lam=1.0, tail_coeff=6.0, chart_id="duffing-planar")

    if name == "duffing-oscillator":
        alpha = float(params.get("alpha", 1.0))
        g0 = float(params.get("g0", 0.5))
        theta0 = float(params.get("theta0", 0.0))
        if alpha <= 0 or g0 < 0:
            raise ValueError("need alpha > 0 and g0 >= 0")
        amp = math.sqrt(2.0 * g0 / alpha)

        def batch(ts, _a=alpha, _A=amp, _th=theta0):
            ts = np.asarray(ts, dtype=float)
            s = 1.0 / np.cosh(0.5 * ts)
            z1 = 1.5 * s * s
            z2 = -z1 * np.tanh(0.5 * ts)
            ph = _a * ts + _th
            return np.stack([z1, z2, _A * np.cos(ph), -_A * np.sin(ph)],
                            axis=1)

        return HomoclinicOrbit(
            kind="saddle-loop", dimension=4, coords_batch=batch,
            limit=LimitOrbitDesc(kind="periodic", omega=alpha, energy=g0),
            energy=g0, omega=alpha, phase_offset=theta0,
            phase_constants=(0.0, 0.0), lam=1.0, tail_coeff=6.0 * (1.0 + amp),
            chart_id="duffing-oscillator", anchor_phase_index=2,
            meta={"alpha": alpha, "g0": g0, "amp": amp, "theta0": theta0})

    raise ValueError(f"no closed form named {name!r}")


@dataclass
class ShotData:
    """Raw product of a saddle-loop shot on a (possibly reduced) chart."""

    traj: Trajectory               # integration time in [0, t_section]
    t_section: float               # time of flight from launch to the section
    launch: np.ndarray
    section_coords: np.ndarray
    saddle: SaddleInfo
    lam: float
    delta: float


def shoot_homoclinic(field: VectorFieldHandle, saddle: SaddleInfo,
                     launch_dir: np.ndarray, section: EventSpec, *,
                     delta: float = 1e-8, t_cap: float = 200.0,
                     tol: tuple = (1e-13, 1e-13),
                     drift_check: Optional[Callable[[np.ndarray], float]] = None,
                     drift_tol: float = 1e-8) -> ShotData:
    """Leave a saddle along launch_dir with offset delta and fly until the
    first section crossing.  The section must exist within t_cap.

    drift_check, if given, maps raw coordinates to a conserved quantity; the
    shot is rejected when its variation along the flight exceeds drift_tol.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    if saddle.classification != "saddle":
        raise ShootError(f"cannot shoot from a {saddle.classification}")
    v = np.asarray(launch_dir, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise ValueError("zero launch direction")
    v = v / nv
    lam = float(np.max(saddle.eigenvalues.real))
    x0 = saddle.point.array + delta * v
    traj = integrate(field, PhasePoint(tuple(x0), saddle.point.chart_id),
                     0.0, t_cap, tol)
    hits = detect_events(traj, EventSpec(section.function, section.direction,
                                         terminal_flag=True,
                                         name=section.name))
    if not hits:
        raise ShootError("section was not reached within the time cap")
    t_sec, _ = hits[0]
    sec_coords = traj.coords(t_sec)
    if drift_check is not None:
        vals = np.array([drift_check(traj.coords(t))
                         for t in np.linspace(0.0, t_sec, 201)])
        drift = float(np.max(np.abs(vals - vals[0])))
        if drift > drift_tol:
            raise ShootError(
                f"conserved quantity drifted by {drift:.3e} along the shot")
    return ShotData(traj=traj, t_section=float(t_sec), launch=x0,
                    section_coords=sec_coords, saddle=saddle, lam=lam,
                    delta=delta)


def parabolic_orbit_rtbp(rho0: float, *, t_cap: float = 1e4,
                         x_min: float = 1e-3,
                         tol: tuple = (1e-12, 1e-12)) -> dict:
    """Reduced-core data for the degenerate escape orbit of the two-body
    McGehee chart: integrates (x, y, sigma) forward from the symmetric
    crossing x = 2/rho0, y = 0, where sigma is the angle defect
    s(t) - s0 - t.  The negative side follows by parity (x even, y odd,
    sigma odd).

    Returns a dict with the core trajectory, its end time, end coordinates,
    and the asymptotic tail constants; model builders lift this to the full
    chart per phase s0.
    """
    rho0 = float(rho0)
    if rho0 < 2.0:
        raise ValueError("no zero-energy escape orbit below rho0 = 2")

    def raw(t, u):
        x, y, sg = u[0], u[1], u[2]
        x3 = x * x * x
        x4 = x3 * x
        out = np.empty(3, dtype=u.dtype)
        out[0] = -0.5 * x3 * y
        out[1] = -x4 + 0.5 * x4 * x * x * rho0 * rho0
        out[2] = -x4 * rho0
        return out

    fld = VectorFieldHandle(raw=raw, chart_id="rtbp-reduced")
    x0 = 2.0 / rho0
    start = PhasePoint((x0, 0.0, 0.0), "rtbp-reduced")
    traj = integrate(fld, start, 0.0, t_cap, tol)
    hits = detect_events(traj, EventSpec(lambda p: p[0] - x_min, -1,
                                         terminal_flag=True, name="x-floor"))
    t_end = t_cap
    if hits:
        t_end = hits[0][0]
        traj = integrate(fld, start, 0.0, t_end, tol)
    end = traj.coords(t_end)
    xT, sgT = float(end[0]), float(end[2])
    # zero-energy escape: x' ~ -(sqrt2/2) x^4, so the tail is the exact
    # leading solution matched at the core end
    kappa = (1.5 * math.sqrt(2.0)) ** (-1.0 / 3.0)
    return {
        "traj": traj,
        "t_end": float(t_end),
        "x_end": xT,
        "sigma_end": sgT,
        "sigma_infinity": sgT - math.sqrt(2.0) * rho0 * xT,
        "tail_constant": kappa,
        "rho0": rho0,
    }
